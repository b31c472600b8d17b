"""The four consistency losses, the weighted total, and distribution alignment.

Targets (weak-view predictions, propagated pseudo-labels, weak edges, bank
labels) enter as plain numpy arrays, so they are constants to the tape by
construction; gradients reach only the strong-view / labeled-view paths.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .errors import ContractError, ParameterError, StateError, ValidationError

MARGINAL_FLOOR = 1e-6


@dataclass
class LossWeights:
    lambda_nn: float = 1.0
    lambda_ne: float = 1.0
    lambda_ee: float = 1.0
    tau: float = 0.95
    t: float = 0.1
    alpha: float = 0.1

    def __post_init__(self):
        if min(self.lambda_nn, self.lambda_ne, self.lambda_ee) < 0.0:
            raise ParameterError("loss weights must be non-negative")
        if not 0.0 <= self.tau <= 1.0:
            raise ParameterError(f"tau must be in [0, 1], got {self.tau}")
        if self.t <= 0.0:
            raise ParameterError(f"temperature must be positive, got {self.t}")
        if not 0.0 < self.alpha < 1.0:
            raise ParameterError(f"alpha must be in (0, 1), got {self.alpha}")


@dataclass
class DaState:
    """Running vs target class marginals for distribution alignment."""

    running_marginal: np.ndarray
    target_marginal: np.ndarray
    momentum: float = 0.99

    def __post_init__(self):
        if not 0.0 < self.momentum < 1.0:
            raise ParameterError(f"DA momentum must be in (0, 1), got {self.momentum}")


def da_init(labeled_class_counts: np.ndarray, momentum: float = 0.99) -> DaState:
    """Uniform running marginal; target from labeled-set class frequencies."""
    counts = np.asarray(labeled_class_counts, dtype=np.float64)
    target = np.maximum(counts / counts.sum(), MARGINAL_FLOOR)
    target /= target.sum()
    c = counts.shape[0]
    return DaState(np.full(c, 1.0 / c), target, momentum)


def da_align_rows(p_rows: np.ndarray, state: DaState) -> np.ndarray:
    """Rescale rows by target/running marginal and renormalize (no state change)."""
    aligned = p_rows * (state.target_marginal / state.running_marginal)
    return aligned / aligned.sum(axis=1, keepdims=True)


def da_update(state: DaState, p_rows: np.ndarray) -> DaState:
    """Fold the batch mean of raw predictions into the running marginal."""
    mixed = state.momentum * state.running_marginal + (1.0 - state.momentum) * p_rows.mean(axis=0)
    mixed = np.maximum(mixed, MARGINAL_FLOOR)
    mixed /= mixed.sum()
    return DaState(mixed, state.target_marginal, state.momentum)


def distribution_align(p_rows: np.ndarray, state: DaState) -> tuple[np.ndarray, DaState]:
    """Aligned (gradient-blocked) rows plus the updated running state."""
    return da_align_rows(p_rows, state), da_update(state, p_rows)


def supervised_loss(y_onehot: np.ndarray, p_w: Tensor) -> Tensor:
    """Mean cross entropy of labeled weak-view predictions against one-hot y."""
    y = np.asarray(y_onehot, dtype=np.float64)
    if y.shape != p_w.values.shape:
        raise ValidationError(f"supervised_loss: shapes {y.shape} vs {p_w.values.shape}")
    onehot = np.all((y == 0.0) | (y == 1.0)) and np.all(y.sum(axis=1) == 1.0)
    if not onehot:
        raise ValidationError("supervised_loss: targets must be one-hot rows")
    return dc.cross_entropy_rows(dc.constant(y), p_w)


def node_node_loss(
    targets: np.ndarray,
    p_s: Tensor,
    tau: float,
    gate_rows: np.ndarray | None = None,
) -> Tensor:
    """Thresholded cross entropy between pseudo-label targets and strong predictions.

    Rows whose gate max is <= tau are dropped, but the denominator stays the
    full row count. gate_rows defaults to the targets themselves (the
    quantity actually used as the target).
    """
    targets = np.asarray(targets, dtype=np.float64)
    gate = targets if gate_rows is None else np.asarray(gate_rows, dtype=np.float64)
    mask = gate.max(axis=1) > tau
    return dc.cross_entropy_rows(dc.constant(targets * mask[:, None]), p_s)


def node_edge_loss(p_w_targets: np.ndarray, e_s: Tensor, bank_labels: np.ndarray) -> Tensor:
    """Cross entropy between weak targets and labels aggregated via strong edges.

    The aggregation q_b = sum_i p_i * e_s[b, i] is a convex combination of the
    (constant) bank labels, so gradients reach only the strong embeddings.
    """
    bank_labels = np.asarray(bank_labels, dtype=np.float64)
    if bank_labels.shape[0] == 0:
        raise StateError("node_edge_loss: empty bank")
    if e_s.values.shape[1] != bank_labels.shape[0]:
        raise ContractError(
            f"node_edge_loss: {e_s.values.shape[1]} edges vs {bank_labels.shape[0]} bank labels"
        )
    aggregated = dc.matmul(e_s, dc.constant(bank_labels))
    return dc.cross_entropy_rows(dc.constant(p_w_targets), aggregated)


def edge_edge_loss(e_w: np.ndarray, e_s: Tensor) -> Tensor:
    """Cross entropy between weak (target) and strong edge distributions."""
    e_w = np.asarray(e_w, dtype=np.float64)
    if e_w.shape != e_s.values.shape:
        raise ContractError(f"edge_edge_loss: bank snapshots differ, {e_w.shape} vs {e_s.values.shape}")
    return dc.cross_entropy_rows(dc.constant(e_w), e_s)


def total_loss(
    l_s: Tensor,
    l_nn: Tensor | None,
    l_ne: Tensor | None,
    l_ee: Tensor | None,
    weights: LossWeights,
) -> Tensor:
    """Weighted sum; zero-weight or missing terms are skipped entirely, so an
    ablation switch contributes exactly nothing to the gradient."""
    total = l_s
    for term, lam in ((l_nn, weights.lambda_nn), (l_ne, weights.lambda_ne), (l_ee, weights.lambda_ee)):
        if term is not None and lam != 0.0:
            total = dc.add(total, dc.scale(term, lam))
    return total
