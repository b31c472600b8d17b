"""Tape-based reverse-mode autodiff over dense float64 arrays.

Deliberately minimal: only the primitives the training objective needs,
each with a hand-written backward that is checked against central finite
differences (see grad_check). Everything is double precision; there is no
broadcasting beyond the row-vector case used by bias adds.

Forward calls record onto the innermost active Tape only when some input
requires a gradient; with no active tape the same code runs as plain numpy.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

from .errors import (
    ContractError,
    DegenerateInputError,
    DimensionError,
    DomainError,
    ParameterError,
)

LOG_CLAMP = 1e-12

_tls = threading.local()


def _tape_stack() -> list:
    stack = getattr(_tls, "stack", None)
    if stack is None:
        stack = []
        _tls.stack = stack
    return stack


def active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """Dense float64 array with an optional gradient slot."""

    __slots__ = ("values", "requires_grad", "grad")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def item(self) -> float:
        if self.values.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.values.shape}")
        return float(self.values.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.values.shape}{flag})"

    # Small amount of operator sugar; everything routes through module ops.
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(values) -> Tensor:
    """Gradient-free tensor wrapping `values` (no copy)."""
    return Tensor(values)


class Tape:
    """Ordered op record for one reverse sweep.

    Records are appended in execution order, so the reverse walk visits every
    consumer of a tensor before the record that produced it; each gradient is
    therefore fully accumulated when it is propagated, and every requires_grad
    leaf receives exactly one accumulation per backward call.
    """

    __slots__ = ("records", "_produced")

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._produced: set[int] = set()

    def _append(self, out: Tensor, inputs: tuple[Tensor, ...], backward_fn: Callable) -> None:
        self.records.append((out, inputs, backward_fn))
        self._produced.add(id(out))

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack().pop()
        if popped is not self:
            raise ContractError("tape contexts must nest properly")
        return False

    def backward(self, output: Tensor) -> None:
        if output.values.size != 1:
            raise ContractError(f"backward needs a scalar output, got shape {output.values.shape}")
        pending: dict[int, np.ndarray] = {id(output): np.ones_like(output.values)}
        leaf_grads: dict[int, list] = {}
        for out, inputs, backward_fn in reversed(self.records):
            out_grad = pending.pop(id(out), None)
            if out_grad is None:
                continue
            for tensor, grad in zip(inputs, backward_fn(out_grad)):
                if grad is None:
                    continue
                if id(tensor) in self._produced:
                    prev = pending.get(id(tensor))
                    pending[id(tensor)] = grad if prev is None else prev + grad
                elif tensor.requires_grad:
                    slot = leaf_grads.get(id(tensor))
                    if slot is None:
                        leaf_grads[id(tensor)] = [tensor, grad]
                    else:
                        slot[1] = slot[1] + grad
        for tensor, grad in leaf_grads.values():
            tensor.grad = grad if tensor.grad is None else tensor.grad + grad


class no_grad:
    """Context that hides any active tape, so forwards inside run untracked."""

    def __enter__(self):
        _tape_stack().append(None)
        return self

    def __exit__(self, exc_type, exc, tb):
        _tape_stack().pop()
        return False


def _record(inputs: tuple[Tensor, ...], out_values: np.ndarray, backward_fn: Callable) -> Tensor:
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out = Tensor(out_values, requires_grad=True)
        tape._append(out, inputs, backward_fn)
        return out
    return Tensor(out_values)


# ---------------------------------------------------------------------------
# elementwise / structural primitives
# ---------------------------------------------------------------------------


def _check_addable(a: np.ndarray, b: np.ndarray, op: str) -> bool:
    """True when b is a row vector broadcast over a's rows; raises on mismatch."""
    if a.shape == b.shape:
        return False
    if a.ndim == 2 and b.ndim == 1 and b.shape[0] == a.shape[1]:
        return True
    raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not align")


def add(a: Tensor, b: Tensor) -> Tensor:
    rowvec = _check_addable(a.values, b.values, "add")

    def backward(g):
        return g, (g.sum(axis=0) if rowvec else g)

    return _record((a, b), a.values + b.values, backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    rowvec = _check_addable(a.values, b.values, "sub")

    def backward(g):
        return g, (-g.sum(axis=0) if rowvec else -g)

    return _record((a, b), a.values - b.values, backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    rowvec = _check_addable(a.values, b.values, "mul")
    av, bv = a.values, b.values

    def backward(g):
        return g * bv, ((g * av).sum(axis=0) if rowvec else g * av)

    return _record((a, b), av * bv, backward)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def backward(g):
        return (g * s,)

    return _record((a,), a.values * s, backward)


def log(a: Tensor) -> Tensor:
    av = a.values
    if np.any(av <= 0.0):
        raise DomainError("log requires strictly positive inputs")

    def backward(g):
        return (g / av,)

    return _record((a,), np.log(av), backward)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.values)

    def backward(g):
        return (g * out,)

    return _record((a,), out, backward)


def relu(a: Tensor) -> Tensor:
    av = a.values

    def backward(g):
        return (g * (av > 0.0),)

    return _record((a,), np.maximum(av, 0.0), backward)


def row_sum(a: Tensor) -> Tensor:
    if a.values.ndim != 2:
        raise DimensionError(f"row_sum needs a matrix, got shape {a.values.shape}")
    shape = a.values.shape

    def backward(g):
        return (np.broadcast_to(g[:, None], shape).copy(),)

    return _record((a,), a.values.sum(axis=1), backward)


def mean(a: Tensor) -> Tensor:
    n = a.values.size
    shape = a.values.shape

    def backward(g):
        return (np.full(shape, float(g) / n),)

    return _record((a,), np.asarray(a.values.mean()), backward)


def transpose(a: Tensor) -> Tensor:
    if a.values.ndim != 2:
        raise DimensionError(f"transpose needs a matrix, got shape {a.values.shape}")

    def backward(g):
        return (g.T,)

    return _record((a,), a.values.T.copy(), backward)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.values.shape
    out = a.values.reshape(shape)

    def backward(g):
        return (g.reshape(old),)

    return _record((a,), out, backward)


def rows(a: Tensor, start: int, stop: int) -> Tensor:
    if a.values.ndim != 2:
        raise DimensionError(f"rows needs a matrix, got shape {a.values.shape}")
    if not (0 <= start <= stop <= a.values.shape[0]):
        raise DimensionError(f"row slice [{start}:{stop}] out of range for shape {a.values.shape}")
    full = a.values.shape

    def backward(g):
        dx = np.zeros(full)
        dx[start:stop] = g
        return (dx,)

    return _record((a,), a.values[start:stop].copy(), backward)


def cols(a: Tensor, start: int, stop: int) -> Tensor:
    if a.values.ndim != 2:
        raise DimensionError(f"cols needs a matrix, got shape {a.values.shape}")
    if not (0 <= start <= stop <= a.values.shape[1]):
        raise DimensionError(f"column slice [{start}:{stop}] out of range for shape {a.values.shape}")
    full = a.values.shape

    def backward(g):
        dx = np.zeros(full)
        dx[:, start:stop] = g
        return (dx,)

    return _record((a,), a.values[:, start:stop].copy(), backward)


def concat_rows(blocks: Sequence[Tensor]) -> Tensor:
    blocks = tuple(blocks)
    if not blocks:
        raise DimensionError("concat_rows needs at least one block")
    widths = {b.values.shape[1:] for b in blocks}
    if len(widths) != 1:
        raise DimensionError(f"concat_rows blocks disagree on trailing shape: {sorted(widths)}")
    counts = [b.values.shape[0] for b in blocks]
    splits = np.cumsum(counts)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=0))

    return _record(blocks, np.concatenate([b.values for b in blocks], axis=0), backward)


# ---------------------------------------------------------------------------
# composite primitives used by the losses
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    av, bv = a.values, b.values
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise DimensionError(f"matmul: shapes {av.shape} and {bv.shape} do not chain")

    def backward(g):
        return g @ bv.T, av.T @ g

    return _record((a, b), av @ bv, backward)


def softmax_rows(x: Tensor, temperature: float = 1.0) -> Tensor:
    """Row softmax of x / temperature, computed with max-subtraction."""
    if temperature <= 0.0:
        raise ParameterError(f"softmax temperature must be positive, got {temperature}")
    v = x.values / temperature
    v = v - v.max(axis=-1, keepdims=True)
    e = np.exp(v)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        inner = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - inner) / temperature,)

    return _record((x,), out, backward)


def l2_normalize_rows(x: Tensor) -> Tensor:
    xv = x.values
    axis = xv.ndim - 1
    norms = np.sqrt((xv * xv).sum(axis=axis, keepdims=True))
    if np.any(norms == 0.0):
        raise DegenerateInputError("l2_normalize_rows: zero-norm row")
    out = xv / norms

    def backward(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return ((g - out * inner) / norms,)

    return _record((x,), out, backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row (x - mean) / sqrt(var + eps) * gain + bias, population variance."""
    if eps <= 0.0:
        raise ParameterError(f"layer_norm eps must be positive, got {eps}")
    xv = x.values
    if xv.ndim != 2:
        raise DimensionError(f"layer_norm needs a matrix, got shape {xv.shape}")
    n = xv.shape[1]
    if gain.values.shape != (n,) or bias.values.shape != (n,):
        raise DimensionError(
            f"layer_norm gain/bias must have shape ({n},), got {gain.values.shape} and {bias.values.shape}"
        )
    mu = xv.mean(axis=1, keepdims=True)
    xc = xv - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.values + bias.values

    def backward(g):
        gg = g * gain.values
        dgain = (g * xhat).sum(axis=0)
        dbias = g.sum(axis=0)
        dx = inv * (gg - gg.mean(axis=1, keepdims=True) - xhat * (gg * xhat).mean(axis=1, keepdims=True))
        return dx, dgain, dbias

    return _record((x, gain, bias), out, backward)


def cross_entropy_rows(target: Tensor, pred: Tensor) -> Tensor:
    """Row-averaged cross entropy -(1/m) sum_b sum_c target*log(pred).

    pred is clamped at LOG_CLAMP inside the log only; 0*log(0) counts as 0.
    """
    tv, pv = target.values, pred.values
    if tv.shape != pv.shape or tv.ndim != 2:
        raise DimensionError(f"cross_entropy_rows: shapes {tv.shape} and {pv.shape} must be equal matrices")
    if np.any(tv < 0.0) or np.any(pv < 0.0):
        raise DomainError("cross_entropy_rows: negative entries")
    m = tv.shape[0]
    clamped = np.maximum(pv, LOG_CLAMP)
    logp = np.log(clamped)
    out = -(tv * logp).sum() / m

    def backward(g):
        s = float(g) / m
        dpred = np.where(pv > LOG_CLAMP, -s * tv / clamped, 0.0)
        dtarget = -s * logp
        return dtarget, dpred

    return _record((target, pred), np.asarray(out), backward)


def stop_gradient(x: Tensor) -> Tensor:
    """Forward identity whose backward contributes nothing to x."""
    return Tensor(x.values)


# ---------------------------------------------------------------------------
# verification oracle
# ---------------------------------------------------------------------------


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-6) -> float:
    """Max relative error between tape gradients of scalar f and central differences.

    Error metric per coordinate: |analytic - numeric| / max(1, |analytic|, |numeric|).
    """
    base = np.array(x.values, dtype=np.float64, copy=True)
    probe = Tensor(base, requires_grad=True)
    with Tape() as tape:
        out = f(probe)
    if not isinstance(out, Tensor) or out.values.size != 1:
        raise ContractError("grad_check needs a scalar-valued function")
    tape.backward(out)
    analytic = (probe.grad if probe.grad is not None else np.zeros_like(base)).reshape(-1)

    flat = base.reshape(-1)
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        bumped = flat.copy()
        bumped[i] = flat[i] + step
        up = f(Tensor(bumped.reshape(base.shape))).item()
        bumped[i] = flat[i] - step
        down = f(Tensor(bumped.reshape(base.shape))).item()
        numeric[i] = (up - down) / (2.0 * step)

    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom)) if flat.size else 0.0
