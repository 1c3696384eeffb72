"""Differentiable tensor kernel with built-in FLOP and allocation accounting.

Every model computation runs through the primitives in this module so that a
forward pass can be costed exactly and replayed backwards. The cost convention
is fixed and shared with the analytic models in `complexity`:

* one multiply-accumulate = 2 FLOPs, so ``(m,n) @ (n,p)`` costs ``2*m*n*p``
* elementwise add/sub/multiply/scale: 1 FLOP per output element
* softmax: 5, layer_norm: 8, gelu: 10, sigmoid: 4, bce: 10 per element
* data movement (concat, slice, transpose, reshape, gather, tile): 0 FLOPs

All ops require an active `Tape`. The tape keeps a reference to every
intermediate for the backward pass, so its cumulative `alloc_bytes` over one
forward+backward is also the live peak of that pass.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf, expit

ADD_FLOPS_PER_ELEM = 1
SCALE_FLOPS_PER_ELEM = 1
SOFTMAX_FLOPS_PER_ELEM = 5
LAYER_NORM_FLOPS_PER_ELEM = 8
GELU_FLOPS_PER_ELEM = 10
SIGMOID_FLOPS_PER_ELEM = 4
BCE_FLOPS_PER_ELEM = 10

LOG_FLOOR = 1e-12
LAYER_NORM_EPS = 1e-5
ADAM_EPS = 1e-8


def matmul_flops(m: int, n: int, p: int) -> int:
    return 2 * m * n * p


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class ValidationError(ValueError):
    """An input violates a documented precondition."""


_ACTIVE = threading.local()


def active_tape() -> "Tape":
    tape = getattr(_ACTIVE, "tape", None)
    if tape is None:
        raise RuntimeError("no active Tape; wrap the computation in `with Tape(...):`")
    return tape


def current_tape() -> "Tape | None":
    return getattr(_ACTIVE, "tape", None)


class Tape:
    """Execution record of one forward/backward pass.

    Ops append themselves in execution order; `backward` replays the list in
    reverse, visiting each recorded op exactly once. `flops` counts forward
    work only. `alloc_bytes` counts every tensor-data and gradient buffer
    created while the tape is active; intermediates are retained for the
    backward pass, so the cumulative count over a single pass equals the
    pass's live peak.
    """

    def __init__(self, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        self.ops: list[tuple[Tensor, object]] = []
        self.flops = 0
        self.alloc_bytes = 0

    def __enter__(self) -> "Tape":
        if getattr(_ACTIVE, "tape", None) is not None:
            raise RuntimeError("a Tape is already active in this thread")
        _ACTIVE.tape = self
        return self

    def __exit__(self, *exc):
        _ACTIVE.tape = None
        return False

    def record(self, out: "Tensor", backward_fn) -> None:
        self.ops.append((out, backward_fn))

    def add_flops(self, n: int) -> None:
        self.flops += int(n)

    def add_alloc(self, nbytes: int) -> None:
        self.alloc_bytes += int(nbytes)

    def backward(self, loss: "Tensor") -> None:
        """Seed d(loss)/d(loss)=1 and replay recorded ops in reverse."""
        if loss.data.shape != ():
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        loss.grad = np.ones((), dtype=loss.data.dtype)
        self.add_alloc(loss.grad.nbytes)
        for out, fn in reversed(self.ops):
            if fn is None or out.grad is None:
                continue
            fn(out.grad)

    def reset(self) -> None:
        self.ops.clear()
        self.flops = 0
        self.alloc_bytes = 0


class Tensor:
    """Dense real array plus an optional gradient accumulated by the tape."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data: np.ndarray, requires_grad: bool = False, name: str | None = None):
        self.data = data
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__


def tensor(values, requires_grad: bool = False, dtype=None, name: str | None = None) -> Tensor:
    """Wrap values as a Tensor; dtype defaults to the active tape's dtype."""
    if dtype is None:
        tape = current_tape()
        dtype = tape.dtype if tape is not None else np.float64
    data = np.asarray(values, dtype=dtype)
    out = Tensor(data, requires_grad, name)
    tape = current_tape()
    if tape is not None:
        tape.add_alloc(data.nbytes)
    return out


def param(values, dtype=np.float64, name: str | None = None) -> Tensor:
    """Create a trainable parameter (allocated outside any tape)."""
    return Tensor(np.asarray(values, dtype=dtype), requires_grad=True, name=name)


def _make(tape: Tape, data: np.ndarray, requires_grad: bool, count_alloc: bool = True) -> Tensor:
    out = Tensor(data, requires_grad)
    if count_alloc:
        tape.add_alloc(data.nbytes)
    return out


def _accum(tape: Tape, t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
        tape.add_alloc(t.grad.nbytes)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcasted gradient back to the original operand shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """(m,n) @ (n,p) -> (m,p); 2*m*n*p FLOPs."""
    tape = active_tape()
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    m, n = a.shape
    p = b.shape[1]
    out = _make(tape, a.data @ b.data, a.requires_grad or b.requires_grad)
    tape.add_flops(matmul_flops(m, n, p))
    if out.requires_grad:
        def bwd(g):
            if a.requires_grad:
                _accum(tape, a, g @ b.data.T)
            if b.requires_grad:
                _accum(tape, b, a.data.T @ g)
        tape.record(out, bwd)
    else:
        tape.record(out, None)
    return out


def _elementwise_binary(a: Tensor, b: Tensor, fwd, da, db) -> Tensor:
    tape = active_tape()
    try:
        data = fwd(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"incompatible shapes {a.shape} and {b.shape}") from exc
    out = _make(tape, data, a.requires_grad or b.requires_grad)
    tape.add_flops(data.size * ADD_FLOPS_PER_ELEM)
    if out.requires_grad:
        def bwd(g):
            if a.requires_grad:
                _accum(tape, a, _unbroadcast(da(g), a.shape))
            if b.requires_grad:
                _accum(tape, b, _unbroadcast(db(g), b.shape))
        tape.record(out, bwd)
    else:
        tape.record(out, None)
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise a+b with numpy broadcasting; 1 FLOP per output element."""
    return _elementwise_binary(a, b, lambda x, y: x + y, lambda g: g, lambda g: g)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return _elementwise_binary(a, b, lambda x, y: x - y, lambda g: g, lambda g: -g)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return _elementwise_binary(
        a, b, lambda x, y: x * y, lambda g: g * b.data, lambda g: g * a.data
    )


def scale(a: Tensor, s: float) -> Tensor:
    """a * scalar; 1 FLOP per element."""
    tape = active_tape()
    out = _make(tape, a.data * s, a.requires_grad)
    tape.add_flops(a.size * SCALE_FLOPS_PER_ELEM)
    if out.requires_grad:
        tape.record(out, lambda g: _accum(tape, a, g * s))
    else:
        tape.record(out, None)
    return out


def concat(parts: list[Tensor], axis: int = 0) -> Tensor:
    """Concatenate along axis; data movement only (0 FLOPs)."""
    tape = active_tape()
    data = np.concatenate([p.data for p in parts], axis=axis)
    out = _make(tape, data, any(p.requires_grad for p in parts))
    if out.requires_grad:
        sizes = [p.shape[axis] for p in parts]
        offsets = np.cumsum([0] + sizes)
        def bwd(g):
            for part, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
                if part.requires_grad:
                    idx = [slice(None)] * g.ndim
                    idx[axis] = slice(lo, hi)
                    _accum(tape, part, g[tuple(idx)])
        tape.record(out, bwd)
    else:
        tape.record(out, None)
    return out


def transpose(a: Tensor) -> Tensor:
    """2-D transpose; a view, so no allocation and 0 FLOPs."""
    tape = active_tape()
    out = _make(tape, a.data.T, a.requires_grad, count_alloc=False)
    if out.requires_grad:
        tape.record(out, lambda g: _accum(tape, a, g.T))
    else:
        tape.record(out, None)
    return out


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    tape = active_tape()
    out = _make(tape, a.data.reshape(shape), a.requires_grad, count_alloc=False)
    if out.requires_grad:
        tape.record(out, lambda g: _accum(tape, a, g.reshape(a.shape)))
    else:
        tape.record(out, None)
    return out


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    """Rows [start, stop) along axis 0; a view (0 FLOPs, 0 bytes)."""
    tape = active_tape()
    out = _make(tape, a.data[start:stop], a.requires_grad, count_alloc=False)
    if out.requires_grad:
        def bwd(g):
            buf = np.zeros_like(a.data)
            buf[start:stop] = g
            _accum(tape, a, buf)
        tape.record(out, bwd)
    else:
        tape.record(out, None)
    return out


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    tape = active_tape()
    out = _make(tape, a.data[:, start:stop], a.requires_grad, count_alloc=False)
    if out.requires_grad:
        def bwd(g):
            buf = np.zeros_like(a.data)
            buf[:, start:stop] = g
            _accum(tape, a, buf)
        tape.record(out, bwd)
    else:
        tape.record(out, None)
    return out


def row(a: Tensor, i: int) -> Tensor:
    """Row i as a 1-D vector; kept as a view into a."""
    tape = active_tape()
    out = _make(tape, a.data[i], a.requires_grad, count_alloc=False)
    if out.requires_grad:
        def bwd(g):
            buf = np.zeros_like(a.data)
            buf[i] = g
            _accum(tape, a, buf)
        tape.record(out, bwd)
    else:
        tape.record(out, None)
    return out


def tile_rows(v: Tensor, n: int) -> Tensor:
    """Broadcast a (d,) vector to (n, d) rows; a read-only view, 0 FLOPs."""
    tape = active_tape()
    if v.data.ndim != 1:
        raise ShapeError(f"tile_rows expects a vector, got shape {v.shape}")
    out = _make(tape, np.broadcast_to(v.data, (n, v.shape[0])), v.requires_grad, count_alloc=False)
    if out.requires_grad:
        tape.record(out, lambda g: _accum(tape, v, g.sum(axis=0)))
    else:
        tape.record(out, None)
    return out


def gather_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup table[ids]; scatter-add on the way back."""
    tape = active_tape()
    ids = np.asarray(ids, dtype=np.intp)
    out = _make(tape, table.data[ids], table.requires_grad)
    if out.requires_grad:
        def bwd(g):
            buf = np.zeros_like(table.data)
            np.add.at(buf, ids, g)
            _accum(tape, table, buf)
        tape.record(out, bwd)
    else:
        tape.record(out, None)
    return out


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along axis; 5 FLOPs per element."""
    tape = active_tape()
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=axis, keepdims=True)
    out = _make(tape, p, a.requires_grad)
    tape.add_flops(p.size * SOFTMAX_FLOPS_PER_ELEM)
    if out.requires_grad:
        def bwd(g):
            dot = (g * p).sum(axis=axis, keepdims=True)
            _accum(tape, a, p * (g - dot))
        tape.record(out, bwd)
    else:
        tape.record(out, None)
    return out


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize the last axis to zero mean/unit variance, then affine.

    Population variance with an eps floor, so constant rows map to beta.
    8 FLOPs per element.
    """
    tape = active_tape()
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: gamma/beta {gamma.shape}/{beta.shape} vs last dim {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out_data = gamma.data * xhat + beta.data
    out = _make(tape, out_data, x.requires_grad or gamma.requires_grad or beta.requires_grad)
    tape.add_flops(out_data.size * LAYER_NORM_FLOPS_PER_ELEM)
    if out.requires_grad:
        def bwd(g):
            lead = tuple(range(g.ndim - 1))
            if beta.requires_grad:
                _accum(tape, beta, g.sum(axis=lead) if lead else g.copy())
            if gamma.requires_grad:
                gg = (g * xhat).sum(axis=lead) if lead else g * xhat
                _accum(tape, gamma, gg)
            if x.requires_grad:
                dxhat = g * gamma.data
                term = dxhat - dxhat.mean(axis=-1, keepdims=True) \
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
                _accum(tape, x, inv * term)
        tape.record(out, bwd)
    else:
        tape.record(out, None)
    return out


def _phi(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + erf(x / math.sqrt(2.0)))


def gelu(x: Tensor) -> Tensor:
    """Exact x * Phi(x) via the error function; 10 FLOPs per element."""
    tape = active_tape()
    cdf = _phi(x.data)
    out = _make(tape, x.data * cdf, x.requires_grad)
    tape.add_flops(x.size * GELU_FLOPS_PER_ELEM)
    if out.requires_grad:
        def bwd(g):
            pdf = np.exp(-0.5 * x.data * x.data) / math.sqrt(2.0 * math.pi)
            _accum(tape, x, g * (cdf + x.data * pdf))
        tape.record(out, bwd)
    else:
        tape.record(out, None)
    return out


def sigmoid(x: Tensor) -> Tensor:
    tape = active_tape()
    s = expit(x.data)
    out = _make(tape, s, x.requires_grad)
    tape.add_flops(x.size * SIGMOID_FLOPS_PER_ELEM)
    if out.requires_grad:
        tape.record(out, lambda g: _accum(tape, x, g * s * (1.0 - s)))
    else:
        tape.record(out, None)
    return out


def sum_all(a: Tensor) -> Tensor:
    """Sum of all elements; 1 FLOP per element."""
    tape = active_tape()
    out = _make(tape, np.asarray(a.data.sum()), a.requires_grad)
    tape.add_flops(a.size * ADD_FLOPS_PER_ELEM)
    if out.requires_grad:
        tape.record(out, lambda g: _accum(tape, a, np.broadcast_to(g, a.shape).copy()))
    else:
        tape.record(out, None)
    return out


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Mean binary cross-entropy over classes, in the stable log-sum-exp form.

    Per element: max(z,0) - z*t + log1p(exp(-|z|)). Targets must be exactly
    0 or 1. 10 FLOPs per element.
    """
    tape = active_tape()
    t = targets.data if isinstance(targets, Tensor) else np.asarray(targets, dtype=logits.data.dtype)
    if t.shape != logits.shape:
        raise ShapeError(f"bce_with_logits: targets {t.shape} vs logits {logits.shape}")
    if not np.all((t == 0) | (t == 1)):
        raise ValidationError("bce_with_logits: targets must be binary (0 or 1)")
    z = logits.data
    per = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))
    out = _make(tape, np.asarray(per.mean()), logits.requires_grad)
    tape.add_flops(z.size * BCE_FLOPS_PER_ELEM)
    if out.requires_grad:
        def bwd(g):
            _accum(tape, logits, g * (expit(z) - t) / z.size)
        tape.record(out, bwd)
    else:
        tape.record(out, None)
    return out


def unary_op(x: Tensor, forward, backward, flops_per_elem: int = 0) -> Tensor:
    """Record a custom elementwise op (used by test harnesses to inject faults).

    forward(x_data) -> out_data; backward(g, x_data, out_data) -> grad_x.
    """
    tape = active_tape()
    data = forward(x.data)
    out = _make(tape, data, x.requires_grad)
    tape.add_flops(x.size * flops_per_elem)
    if out.requires_grad:
        tape.record(out, lambda g: _accum(tape, x, backward(g, x.data, data)))
    else:
        tape.record(out, None)
    return out


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    """First/second moment buffers plus the shared step counter."""

    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def init(cls, params: list[Tensor]) -> "AdamState":
        return cls(
            m=[np.zeros_like(p.data) for p in params],
            v=[np.zeros_like(p.data) for p in params],
        )


def adam_step(
    params: list[Tensor],
    state: AdamState,
    lr: float = 1e-4,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = ADAM_EPS,
) -> None:
    """Bias-corrected Adam update, in place. Missing grads count as zero."""
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def zero_grads(params: list[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

GRAD_CHECK_H = 1e-5
GRAD_CHECK_DENOM_FLOOR = 1e-6


@dataclass
class GradCheckEntry:
    name: str
    max_rel_err: float
    n_checked: int
    failures: list[tuple[tuple[int, ...], float, float, float]] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures


@dataclass
class GradCheckReport:
    entries: list[GradCheckEntry]
    tolerance: float

    @property
    def max_rel_err(self) -> float:
        return max((e.max_rel_err for e in self.entries), default=0.0)

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.entries)


def grad_check(fn, params: list[Tensor], tolerance: float = 1e-4, h: float = GRAD_CHECK_H) -> GradCheckReport:
    """Compare tape gradients of scalar fn(params) against central differences.

    Relative error uses |a - fd| / max(|a|, |fd|, 1e-6) per coordinate, so
    coordinates where both sides are (numerically) zero pass. Requires
    float64 parameters; collects every failing coordinate instead of
    stopping at the first.
    """
    for p in params:
        if p.data.dtype != np.float64:
            raise ValidationError(f"grad_check requires float64 params, got {p.data.dtype}")
    zero_grads(params)
    with Tape(np.float64) as tape:
        loss = fn(params)
        if loss.data.shape != ():
            raise ValidationError("grad_check: fn must return a scalar")
        tape.backward(loss)
    analytic = [
        p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params
    ]
    zero_grads(params)

    def eval_loss() -> float:
        with Tape(np.float64):
            return float(fn(params).data)

    entries = []
    for p, a in zip(params, analytic):
        name = p.name or f"param{params.index(p)}"
        max_rel = 0.0
        failures = []
        flat = p.data.reshape(-1)
        a_flat = a.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = eval_loss()
            flat[i] = orig - h
            f_minus = eval_loss()
            flat[i] = orig
            fd = (f_plus - f_minus) / (2.0 * h)
            rel = abs(a_flat[i] - fd) / max(abs(a_flat[i]), abs(fd), GRAD_CHECK_DENOM_FLOOR)
            max_rel = max(max_rel, rel)
            if rel > tolerance:
                idx = np.unravel_index(i, p.data.shape)
                failures.append((tuple(int(j) for j in idx), float(a_flat[i]), float(fd), float(rel)))
        entries.append(GradCheckEntry(name, max_rel, flat.size, failures))
    return GradCheckReport(entries, tolerance)
