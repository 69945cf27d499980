"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every value is a numpy float64 array wrapped in a :class:`Tensor`. Inside a
``with Tape():`` scope, each differentiable primitive appends one entry to
the tape; :func:`backward` replays the tape once in reverse order, which is
a valid reverse-topological order because entries are recorded in execution
order. :func:`finite_diff_grad` is the independent central-difference oracle
every backward rule is checked against.

Broadcasting is deliberately narrow: elementwise ops accept equal shapes, a
trailing vector (bias over rows), or a 0-d scalar. Anything wider raises a
:class:`~demansia.errors.DimensionError` instead of silently broadcasting.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError, ValidationError

Array = np.ndarray

__all__ = [
    "Tensor",
    "Tape",
    "record",
    "backward",
    "finite_diff_grad",
    "finite_diff_coords",
    "rel_err",
    "check_finite",
    "add",
    "mul",
    "neg",
    "scale",
    "shift",
    "matmul",
    "transpose",
    "reshape",
    "expand",
    "narrow",
    "concat",
    "reverse",
    "sum_axis",
    "sum_all",
    "mean_all",
    "exp",
    "powc",
    "expm1_over_x",
    "silu",
    "softplus",
    "softmax_rows",
    "cross_entropy",
    "conv1d_causal",
    "conv2d",
]


class Tensor:
    """A dense 64-bit real array, optionally tracked for reverse-mode grads.

    Values are immutable by convention once created; gradients accumulate in
    ``.grad`` (same shape as ``.data``) when :func:`backward` reaches a leaf.
    """

    __slots__ = ("data", "requires_grad", "grad", "_tape", "_produced")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Array | None = None
        self._tape: "Tape | None" = None
        self._produced = False  # True when a taped op created this tensor

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return shift(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return add(self, neg(other))
        return shift(self, -float(other))

    def __rsub__(self, other):
        return shift(neg(self), float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ContractError("tensor/tensor division is not a primitive; use powc")
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


_ACTIVE: list["Tape"] = []


class Tape:
    """Ordered record of primitive ops applied inside its ``with`` scope.

    One tape owns one execution context; nesting scopes is a contract error.
    Reverse iteration over the record is a reverse-topological replay that
    touches every node exactly once.
    """

    def __init__(self):
        self._nodes: list[_Node] = []

    def __len__(self) -> int:
        return len(self._nodes)

    def __enter__(self) -> "Tape":
        if _ACTIVE:
            raise ContractError("a Tape scope is already active; tapes do not nest")
        _ACTIVE.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _ACTIVE.pop()
        return False


def _active_tape() -> Tape | None:
    return _ACTIVE[-1] if _ACTIVE else None


def record(out: Tensor, inputs: tuple[Tensor, ...], backward_rule: Callable) -> Tensor:
    """Attach ``out`` to the active tape when any input is grad-tracked.

    ``backward_rule(gout)`` must return one gradient array (or None) per
    input, each matching that input's shape. Exposed so downstream modules
    can define their own fused primitives.
    """
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._produced = True
        out._tape = tape
        tape._nodes.append(_Node(out, inputs, backward_rule))
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every requires_grad leaf on the tape."""
    if loss.data.shape != ():
        raise ContractError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    tape = loss._tape
    if tape is None:
        raise ContractError("loss is not on a tape; run the computation inside `with Tape():`")
    grads: dict[int, Array] = {id(loss): np.ones((), dtype=np.float64)}
    for node in reversed(tape._nodes):
        gout = grads.pop(id(node.out), None)
        if gout is None:
            continue
        for tensor, gin in zip(node.inputs, node.backward(gout)):
            if gin is None or not tensor.requires_grad:
                continue
            if tensor._produced:
                held = grads.get(id(tensor))
                grads[id(tensor)] = gin if held is None else held + gin
            else:
                tensor.grad = np.array(gin) if tensor.grad is None else tensor.grad + gin


# ---------------------------------------------------------------------------
# gradient oracle and error metric
# ---------------------------------------------------------------------------


def finite_diff_grad(f: Callable[[Tensor], "Tensor | float"], x: Tensor, eps: float = 1e-5) -> Tensor:
    """Central-difference gradient of a scalar function, one coordinate at a time.

    Independent of the tape: ``f`` is evaluated as plain forward arithmetic.
    """
    if eps <= 0:
        raise ValidationError(f"eps must be positive, got {eps}")
    out = np.empty_like(x.data)
    flat = out.reshape(-1)
    for i in range(x.data.size):
        flat[i] = _central_diff(f, x, i, eps)
    return Tensor(out)


def finite_diff_coords(
    f: Callable[[Tensor], "Tensor | float"],
    x: Tensor,
    coords: Iterable[int],
    eps: float = 1e-5,
) -> list[float]:
    """Central differences at selected flat coordinates of ``x``."""
    return [_central_diff(f, x, int(i), eps) for i in coords]


def _central_diff(f, x: Tensor, i: int, eps: float) -> float:
    base = x.data.reshape(-1)
    keep = base[i]
    base[i] = keep + eps
    hi = _scalar_value(f(x))
    base[i] = keep - eps
    lo = _scalar_value(f(x))
    base[i] = keep
    return (hi - lo) / (2.0 * eps)


def _scalar_value(v) -> float:
    if isinstance(v, Tensor):
        return float(v.data)
    return float(v)


def rel_err(a, b) -> float:
    """Max elementwise |a-b| / max(1, |a|, |b|)."""
    av = a.data if isinstance(a, Tensor) else np.asarray(a, dtype=np.float64)
    bv = b.data if isinstance(b, Tensor) else np.asarray(b, dtype=np.float64)
    if av.shape != bv.shape:
        raise DimensionError(f"rel_err shapes differ: {av.shape} vs {bv.shape}")
    denom = np.maximum(1.0, np.maximum(np.abs(av), np.abs(bv)))
    if av.size == 0:
        return 0.0
    return float(np.max(np.abs(av - bv) / denom))


def check_finite(t: Tensor, name: str = "tensor") -> None:
    """Explicit NaN/Inf detection; raises NumericError naming the offender."""
    bad = ~np.isfinite(t.data)
    if bad.any():
        idx = np.unravel_index(int(np.argmax(bad)), t.data.shape)
        raise NumericError(f"non-finite value in {name} at index {tuple(int(i) for i in idx)}")


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


def _reduce_to(shape: tuple[int, ...], g: Array) -> Array:
    """Sum ``g`` down to ``shape`` for the narrow broadcast patterns of add/mul."""
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum())
    # trailing-vector case: shape == (n,) against g (..., n)
    return g.reshape(-1, shape[0]).sum(axis=0)


def _broadcast_ok(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape:
        return
    if b.shape == ():
        return
    if b.ndim == 1 and a.ndim >= 2 and a.shape[-1] == b.shape[0]:
        return
    raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    """a + b; b may be a trailing vector (bias over rows) or a 0-d scalar."""
    _broadcast_ok(a, b, "add")
    out = Tensor(a.data + b.data)

    def rule(g):
        return _reduce_to(a.shape, g), _reduce_to(b.shape, g)

    return record(out, (a, b), rule)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise a * b with the same narrow broadcasting as add."""
    _broadcast_ok(a, b, "mul")
    out = Tensor(a.data * b.data)

    def rule(g):
        return _reduce_to(a.shape, g * b.data), _reduce_to(b.shape, g * a.data)

    return record(out, (a, b), rule)


def scale(x: Tensor, c: float) -> Tensor:
    out = Tensor(x.data * c)
    return record(out, (x,), lambda g: (g * c,))


def shift(x: Tensor, c: float) -> Tensor:
    out = Tensor(x.data + c)
    return record(out, (x,), lambda g: (g,))


def neg(x: Tensor) -> Tensor:
    return scale(x, -1.0)


# ---------------------------------------------------------------------------
# linear algebra and structure
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Strict 2-D matrix product."""
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    out = Tensor(a.data @ b.data)

    def rule(g):
        return g @ b.data.T, a.data.T @ g

    return record(out, (a, b), rule)


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise DimensionError(f"transpose needs a 2-D tensor, got {x.shape}")
    out = Tensor(x.data.T)
    return record(out, (x,), lambda g: (g.T,))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    out = Tensor(x.data.reshape(tuple(shape)))
    return record(out, (x,), lambda g: (g.reshape(x.shape),))


def expand(x: Tensor, axis: int, n: int) -> Tensor:
    """Insert a new axis at ``axis`` repeated ``n`` times (explicit broadcast)."""
    out = Tensor(np.repeat(np.expand_dims(x.data, axis), n, axis=axis))
    return record(out, (x,), lambda g: (g.sum(axis=axis),))


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along ``axis``."""
    if not (0 <= start and start + length <= x.shape[axis]):
        raise DimensionError(
            f"narrow [{start}, {start + length}) exceeds extent {x.shape[axis]} on axis {axis}"
        )
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)
    out = Tensor(x.data[sl].copy())

    def rule(g):
        full = np.zeros_like(x.data)
        full[sl] = g
        return (full,)

    return record(out, (x,), rule)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = list(parts)
    if not parts:
        raise DimensionError("concat of zero tensors")
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
    offsets = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def rule(g):
        return tuple(np.split(g, offsets, axis=axis))

    return record(out, tuple(parts), rule)


def reverse(x: Tensor, axis: int = 0) -> Tensor:
    out = Tensor(np.flip(x.data, axis=axis).copy())
    return record(out, (x,), lambda g: (np.flip(g, axis=axis),))


def sum_axis(x: Tensor, axis: int) -> Tensor:
    out = Tensor(x.data.sum(axis=axis))
    n = x.shape[axis]
    return record(out, (x,), lambda g: (np.repeat(np.expand_dims(g, axis), n, axis=axis),))


def sum_all(x: Tensor) -> Tensor:
    out = Tensor(x.data.sum())
    return record(out, (x,), lambda g: (np.full(x.shape, g),))


def mean_all(x: Tensor) -> Tensor:
    out = Tensor(x.data.mean())
    inv = 1.0 / x.data.size
    return record(out, (x,), lambda g: (np.full(x.shape, g * inv),))


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------


def _sigmoid(z: Array) -> Array:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    e = np.exp(z[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def exp(x: Tensor) -> Tensor:
    e = np.exp(x.data)
    out = Tensor(e)
    return record(out, (x,), lambda g: (g * e,))


def powc(x: Tensor, p: float) -> Tensor:
    """Elementwise x**p for a constant exponent (caller keeps x in domain)."""
    out = Tensor(x.data**p)
    return record(out, (x,), lambda g: (g * p * x.data ** (p - 1.0),))


def phi_expm1(z: Array) -> Array:
    """phi(z) = (e^z - 1)/z with phi(0) = 1; unity branch below |z| < 1e-8."""
    small = np.abs(z) < 1e-8
    if small.any():
        safe = np.where(small, 1.0, z)
        return np.where(small, 1.0, np.expm1(safe) / safe)
    out = np.expm1(z)
    out /= z
    return out


def phi_expm1_prime(z: Array) -> Array:
    """Derivative of phi; series branch dodges the cancellation near zero."""
    near = np.abs(z) < 1e-4
    zz = np.where(near, 1.0, z)
    exact = (np.exp(zz) * (zz - 1.0) + 1.0) / (zz * zz)
    series = 0.5 + z / 3.0 + z * z / 8.0
    return np.where(near, series, exact)


def expm1_over_x(x: Tensor) -> Tensor:
    """Elementwise phi(z) = (e^z - 1)/z, differentiable."""
    z = x.data
    out = Tensor(phi_expm1(z))
    return record(out, (x,), lambda g: (g * phi_expm1_prime(z),))


def silu(x: Tensor) -> Tensor:
    """x * sigmoid(x)."""
    s = _sigmoid(x.data)
    out = Tensor(x.data * s)
    return record(out, (x,), lambda g: (g * s * (1.0 + x.data * (1.0 - s)),))


def softplus(x: Tensor) -> Tensor:
    """ln(1 + e^x), overflow-safe at both tails."""
    out = Tensor(np.logaddexp(0.0, x.data))
    return record(out, (x,), lambda g: (g * _sigmoid(x.data),))


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax of a 2-D tensor, computed with max subtraction."""
    if x.ndim != 2:
        raise DimensionError(f"softmax_rows needs a 2-D tensor, got {x.shape}")
    m = x.data.max(axis=1, keepdims=True)
    e = np.exp(x.data - m)
    y = e / e.sum(axis=1, keepdims=True)
    out = Tensor(y)

    def rule(g):
        dot = (g * y).sum(axis=1, keepdims=True)
        return ((g - dot) * y,)

    return record(out, (x,), rule)


def cross_entropy(logits: Tensor, target) -> Tensor:
    """-sum(target * log softmax(logits)) for a hard index or soft distribution.

    Soft targets must sum to 1 within 1e-6. Targets are treated as constants;
    gradients flow through the logits only.
    """
    if logits.ndim != 1:
        raise DimensionError(f"cross_entropy needs a 1-D logit vector, got {logits.shape}")
    k = logits.shape[0]
    if isinstance(target, (int, np.integer)):
        if not 0 <= int(target) < k:
            raise ValidationError(f"class index {int(target)} out of range for {k} classes")
        tvec = np.zeros(k)
        tvec[int(target)] = 1.0
    else:
        tvec = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
        if tvec.shape != (k,):
            raise DimensionError(f"target shape {tvec.shape} does not match logits {logits.shape}")
        if abs(tvec.sum() - 1.0) > 1e-6:
            raise ValidationError(f"soft target sums to {tvec.sum():.9g}, expected 1 within 1e-6")
    m = logits.data.max()
    z = logits.data - m
    lse = m + np.log(np.exp(z).sum())
    out = Tensor(lse - float(tvec @ logits.data))
    sm = np.exp(logits.data - lse)

    def rule(g):
        return (g * (sm - tvec),)

    return record(out, (logits,), rule)


# ---------------------------------------------------------------------------
# convolutions
# ---------------------------------------------------------------------------


def conv1d_causal(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Depthwise causal 1-D convolution over the sequence axis.

    x: (M, d), w: (d, k), b: (d,). Output at position t sees x[t-k+1 .. t]
    only (left zero padding of k-1).
    """
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise DimensionError(f"conv1d_causal: x {x.shape} incompatible with w {w.shape}")
    if b.shape != (x.shape[1],):
        raise DimensionError(f"conv1d_causal: bias {b.shape} does not match {x.shape[1]} channels")
    m, d = x.shape
    k = w.shape[1]
    xp = np.zeros((m + k - 1, d))
    xp[k - 1 :] = x.data
    y = np.zeros((m, d))
    for j in range(k):
        y += xp[j : j + m] * w.data[:, j]
    y += b.data
    out = Tensor(y)

    def rule(g):
        db = g.sum(axis=0)
        dw = np.empty_like(w.data)
        dxp = np.zeros_like(xp)
        for j in range(k):
            dw[:, j] = (g * xp[j : j + m]).sum(axis=0)
            dxp[j : j + m] += g * w.data[:, j]
        return dxp[k - 1 :], dw, db

    return record(out, (x, w, b), rule)


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int, padding: int) -> Tensor:
    """2-D convolution, x: (C, H, W), w: (O, C, k, k), b: (O,)."""
    if x.ndim != 3 or w.ndim != 4 or x.shape[0] != w.shape[1]:
        raise DimensionError(f"conv2d: x {x.shape} incompatible with w {w.shape}")
    c, h, wd = x.shape
    o, _, kh, kw = w.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} exceeds padded input {h}x{wd}")
    xp = np.zeros((c, h + 2 * padding, wd + 2 * padding))
    xp[:, padding : padding + h, padding : padding + wd] = x.data
    y = np.zeros((o, ho, wo))
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, i : i + stride * ho : stride, j : j + stride * wo : stride]
            y += np.tensordot(w.data[:, :, i, j], patch, axes=(1, 0))
    y += b.data[:, None, None]
    out = Tensor(y)

    def rule(g):
        db = g.sum(axis=(1, 2))
        dw = np.zeros_like(w.data)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                patch = xp[:, i : i + stride * ho : stride, j : j + stride * wo : stride]
                dw[:, :, i, j] = np.tensordot(g, patch, axes=([1, 2], [1, 2]))
                dxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride] += np.tensordot(
                    w.data[:, :, i, j], g, axes=(0, 0)
                )
        if padding:
            dx = dxp[:, padding : padding + h, padding : padding + wd]
        else:
            dx = dxp
        return dx, dw, db

    return record(out, (x, w, b), rule)
