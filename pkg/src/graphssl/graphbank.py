"""Memory banks of graph nodes, similarity edges, and label propagation.

A node is a unit-norm embedding plus a label distribution. Banks are FIFO
rings; edges are temperature softmax over cosine similarities against the
bank; propagation runs the transductive recursion either iteratively or via
its closed-form fixed point (solved with LU partial pivoting, never an
explicit inverse).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .errors import (
    DegenerateInputError,
    ParameterError,
    StateError,
    ValidationError,
)

NODE_TOL = 1e-9


@dataclass
class GraphNode:
    """Unit embedding z paired with a probability-distribution label."""

    z: np.ndarray
    label: np.ndarray


def _validate_nodes(z: np.ndarray, labels: np.ndarray) -> None:
    norms = np.linalg.norm(z, axis=-1)
    if np.any(np.abs(norms - 1.0) > NODE_TOL):
        worst = float(np.max(np.abs(norms - 1.0)))
        raise ValidationError(f"node embedding norm off unit by {worst:.3e} (> {NODE_TOL})")
    if np.any(labels < 0.0):
        raise ValidationError("node label has negative entries")
    sums = labels.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > NODE_TOL):
        worst = float(np.max(np.abs(sums - 1.0)))
        raise ValidationError(f"node label sum off 1 by {worst:.3e} (> {NODE_TOL})")


class NodeBank:
    """Fixed-capacity FIFO ring of graph nodes.

    After `capacity` insertions the oldest entries are overwritten in
    insertion order. vectors()/labels() return snapshots ordered oldest
    first, so "bank index" always means age rank.
    """

    def __init__(self, capacity: int, dim: int, class_count: int):
        if capacity < 1:
            raise ParameterError(f"bank capacity must be >= 1, got {capacity}")
        self.capacity = int(capacity)
        self.dim = int(dim)
        self.class_count = int(class_count)
        self._z = np.zeros((self.capacity, self.dim))
        self._labels = np.zeros((self.capacity, self.class_count))
        self.size = 0
        self.write_cursor = 0

    def __len__(self) -> int:
        return self.size

    def insert(self, node: GraphNode) -> None:
        z = np.asarray(node.z, dtype=np.float64)
        label = np.asarray(node.label, dtype=np.float64)
        if z.shape != (self.dim,) or label.shape != (self.class_count,):
            raise ValidationError(
                f"node shapes {z.shape}/{label.shape} do not match bank ({self.dim},)/({self.class_count},)"
            )
        _validate_nodes(z, label)
        self._z[self.write_cursor] = z
        self._labels[self.write_cursor] = label
        self.write_cursor = (self.write_cursor + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def insert_batch(self, z: np.ndarray, labels: np.ndarray) -> None:
        z = np.asarray(z, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.float64)
        if z.ndim != 2 or labels.ndim != 2 or z.shape[0] != labels.shape[0]:
            raise ValidationError(f"insert_batch shapes {z.shape}/{labels.shape} do not pair")
        _validate_nodes(z, labels)
        for i in range(z.shape[0]):
            self._z[self.write_cursor] = z[i]
            self._labels[self.write_cursor] = labels[i]
            self.write_cursor = (self.write_cursor + 1) % self.capacity
        self.size = min(self.size + z.shape[0], self.capacity)

    def _order(self) -> np.ndarray:
        if self.size < self.capacity:
            return np.arange(self.size)
        return (self.write_cursor + np.arange(self.capacity)) % self.capacity

    def vectors(self) -> np.ndarray:
        """Embeddings ordered oldest first (copy)."""
        return self._z[self._order()]

    def labels(self) -> np.ndarray:
        """Label distributions ordered oldest first (copy)."""
        return self._labels[self._order()]


def edges(z_query: Tensor | np.ndarray, bank: NodeBank, t: float) -> Tensor:
    """Softmax similarity distribution over the bank at temperature t.

    Differentiable in z_query (bank entries are constants). A 1-D query gives
    a 1-D distribution; an m x d query matrix gives one row per query.
    """
    if bank.size == 0:
        raise StateError("edges: bank is empty")
    if t <= 0.0:
        raise ParameterError(f"edge temperature must be positive, got {t}")
    q = z_query if isinstance(z_query, Tensor) else Tensor(z_query)
    single = q.values.ndim == 1
    if single:
        q = dc.reshape(q, (1, q.values.shape[0]))
    sims = dc.matmul(q, dc.constant(bank.vectors().T))
    e = dc.softmax_rows(sims, t)
    if single:
        e = dc.reshape(e, (bank.size,))
    return e


def affinity_matrix(z_rows: np.ndarray, t: float) -> np.ndarray:
    """Hollow row-stochastic affinity of pairwise similarities at temperature t.

    exp(z_i . z_j / t) with the diagonal forced to zero before row
    normalization (no self-loops).
    """
    z_rows = np.asarray(z_rows, dtype=np.float64)
    if z_rows.ndim != 2 or z_rows.shape[0] < 2:
        raise DegenerateInputError(f"affinity_matrix needs >= 2 rows, got shape {z_rows.shape}")
    if t <= 0.0:
        raise ParameterError(f"affinity temperature must be positive, got {t}")
    sims = (z_rows @ z_rows.T) / t
    sims -= sims.max(axis=1, keepdims=True)  # rescales each row; cancels in the normalization
    a = np.exp(sims)
    np.fill_diagonal(a, 0.0)
    row_sums = a.sum(axis=1, keepdims=True)
    if np.any(row_sums == 0.0):
        raise DegenerateInputError("affinity_matrix: a row underflowed to all zeros")
    return a / row_sums


def topn_select(z_query: np.ndarray, bank: NodeBank, n: int) -> tuple[np.ndarray, np.ndarray]:
    """The min(n, size) bank nodes most similar to z_query.

    Returned in similarity-descending order; exact ties go to the lower bank
    index (older node first).
    """
    if bank.size == 0:
        raise StateError("topn_select: bank is empty")
    if n < 1:
        raise ParameterError(f"topn_select needs n >= 1, got {n}")
    z_query = np.asarray(z_query, dtype=np.float64)
    sims = bank.vectors() @ z_query
    order = np.argsort(-sims, kind="stable")[: min(n, bank.size)]
    return bank.vectors()[order], bank.labels()[order]


def propagate_iterative(a: np.ndarray, y0: np.ndarray, alpha: float, phi: int) -> np.ndarray:
    """phi steps of Y <- alpha * A Y + (1 - alpha) * Y0."""
    if not 0.0 < alpha <= 1.0:
        raise ParameterError(f"iterative propagation needs alpha in (0, 1], got {alpha}")
    if phi < 1:
        raise ParameterError(f"propagation needs phi >= 1, got {phi}")
    a = np.asarray(a, dtype=np.float64)
    y0 = np.asarray(y0, dtype=np.float64)
    y = y0
    for _ in range(phi):
        y = alpha * (a @ y) + (1.0 - alpha) * y0
    return y


def propagate_closed(a: np.ndarray, y0: np.ndarray, alpha: float) -> np.ndarray:
    """Fixed point (1 - alpha) (I - alpha A)^-1 Y0 via an LU solve.

    Works on a single system or on a stack of systems (leading batch axis).
    Singular systems surface as numpy.linalg.LinAlgError; they cannot occur
    for row-stochastic A and alpha < 1.
    """
    if not 0.0 < alpha < 1.0:
        raise ParameterError(f"closed-form propagation needs alpha in (0, 1), got {alpha}")
    a = np.asarray(a, dtype=np.float64)
    y0 = np.asarray(y0, dtype=np.float64)
    n = a.shape[-1]
    system = np.eye(n) - alpha * a
    return np.linalg.solve(system, (1.0 - alpha) * y0)


def propagated_pseudo_label(
    z_w: np.ndarray,
    p_w: np.ndarray,
    labeled_bank: NodeBank,
    n: int,
    alpha: float,
    t: float,
) -> np.ndarray:
    """Pseudo-label for one weak node after propagation over its Top-N graph.

    Builds the (1 + N') node graph of the query plus its nearest labeled-bank
    nodes, propagates to the fixed point, and returns the query row
    renormalized to sum 1. Produces a target: nothing here is differentiable.
    """
    if labeled_bank.size == 0:
        raise StateError("propagated_pseudo_label: labeled bank is empty")
    z_sub, y_sub = topn_select(z_w, labeled_bank, n)
    z_all = np.vstack([np.asarray(z_w, dtype=np.float64)[None, :], z_sub])
    y_all = np.vstack([np.asarray(p_w, dtype=np.float64)[None, :], y_sub])
    a = affinity_matrix(z_all, t)
    y_inf = propagate_closed(a, y_all, alpha)
    out = y_inf[0]
    return out / out.sum()


def propagated_pseudo_labels(
    z_w: np.ndarray,
    p_w: np.ndarray,
    labeled_bank: NodeBank,
    n: int,
    alpha: float,
    t: float,
) -> np.ndarray:
    """Batched propagated_pseudo_label over rows of (z_w, p_w).

    Same arithmetic as the per-sample operation, vectorized: per-row Top-N
    gather, stacked hollow affinities, one batched LU solve.
    """
    if labeled_bank.size == 0:
        raise StateError("propagated_pseudo_labels: labeled bank is empty")
    if n < 1:
        raise ParameterError(f"propagated_pseudo_labels needs n >= 1, got {n}")
    if not 0.0 < alpha < 1.0:
        raise ParameterError(f"closed-form propagation needs alpha in (0, 1), got {alpha}")
    if t <= 0.0:
        raise ParameterError(f"affinity temperature must be positive, got {t}")
    z_w = np.asarray(z_w, dtype=np.float64)
    p_w = np.asarray(p_w, dtype=np.float64)
    m = z_w.shape[0]
    bank_z = labeled_bank.vectors()
    bank_y = labeled_bank.labels()
    k = min(n, labeled_bank.size)

    sims = z_w @ bank_z.T  # (m, size)
    order = np.argsort(-sims, axis=1, kind="stable")[:, :k]  # (m, k)
    nz = bank_z[order]  # (m, k, d)
    ny = bank_y[order]  # (m, k, C)
    query_nbr = np.take_along_axis(sims, order, axis=1)  # (m, k)
    nbr_nbr = np.einsum("mkd,mjd->mkj", nz, nz)  # (m, k, k)

    s = np.empty((m, k + 1, k + 1))
    s[:, 0, 0] = (z_w * z_w).sum(axis=1)
    s[:, 0, 1:] = query_nbr
    s[:, 1:, 0] = query_nbr
    s[:, 1:, 1:] = nbr_nbr
    s /= t
    s -= s.max(axis=2, keepdims=True)
    a = np.exp(s)
    idx = np.arange(k + 1)
    a[:, idx, idx] = 0.0
    a /= a.sum(axis=2, keepdims=True)

    y0 = np.empty((m, k + 1, p_w.shape[1]))
    y0[:, 0, :] = p_w
    y0[:, 1:, :] = ny
    y_inf = propagate_closed(a, y0, alpha)
    out = y_inf[:, 0, :]
    return out / out.sum(axis=1, keepdims=True)
