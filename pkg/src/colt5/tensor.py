"""Dense numpy-backed tensors with reverse-mode automatic differentiation.

Every differentiable operation is a plain function that computes its output
with numpy and, when any input requires a gradient, records a closure that
maps the output gradient back to the inputs.  ``backward`` replays those
closures in reverse topological order.

Broadcasting is deliberately narrow: binary elementwise ops accept equal
shapes, a python scalar, or a vector matching the last dimension.  Anything
else goes through ``broadcast_to``.
"""

from __future__ import annotations

import contextlib
import itertools
import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class NumericInputError(ValueError):
    """Raised when an operation receives non-finite input it cannot handle."""


class ContractError(ValueError):
    """Raised when a caller violates an operation's precondition."""


_node_counter = itertools.count()


class _ThreadState(threading.local):
    # grad mode and the active MAC counter are per thread, so parallel
    # evaluation under no_grad cannot switch off recording for a trainer
    grad_enabled = True
    counter = None


_state = _ThreadState()


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (for the calling thread)."""
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def is_grad_enabled() -> bool:
    return _state.grad_enabled


# ---------------------------------------------------------------------------
# multiply-add accounting
# ---------------------------------------------------------------------------


class MacCounter:
    """Accumulates matmul multiply-adds per tag while active.

    Used to check the analytic cost model against what a forward pass really
    does.  One multiply-add counts as one FLOP.
    """

    def __init__(self):
        self.counts: dict[str, int] = {}
        self._tags: list[str] = []

    @property
    def tag(self) -> str:
        return self._tags[-1] if self._tags else "untagged"

    def add(self, n: int, tag: str | None = None):
        key = tag or self.tag
        self.counts[key] = self.counts.get(key, 0) + int(n)

    def total(self, prefix: str = "") -> int:
        return sum(v for k, v in self.counts.items() if k.startswith(prefix))


@contextlib.contextmanager
def count_macs():
    """Record multiply-adds of every matmul executed inside the block."""
    prev = _state.counter
    _state.counter = MacCounter()
    try:
        yield _state.counter
    finally:
        _state.counter = prev


@contextlib.contextmanager
def mac_scope(tag: str):
    """Attribute multiply-adds inside the block to ``tag``."""
    counter = _state.counter
    if counter is None:
        yield
        return
    counter._tags.append(tag)
    try:
        yield
    finally:
        counter._tags.pop()


def record_macs(n: int, tag: str | None = None):
    if _state.counter is not None:
        _state.counter.add(n, tag)


def _matmul_suspended() -> bool:
    counter = _state.counter
    return counter is None or bool(getattr(counter, "_suspended", False))


@contextlib.contextmanager
def suspend_mac_count():
    """Stop matmuls from counting (for ops that report their own cost)."""
    counter = _state.counter
    if counter is None:
        yield
        return
    prev = getattr(counter, "_suspended", False)
    counter._suspended = True
    try:
        yield
    finally:
        counter._suspended = prev


# ---------------------------------------------------------------------------
# Tensor
# ---------------------------------------------------------------------------


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "node_id", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if dtype is None and arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.node_id = next(_node_counter)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __hash__(self):
        return id(self)

    def __eq__(self, other):
        return self is other

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor / tensor is not supported; multiply by a reciprocal")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def backward(self) -> dict["Tensor", np.ndarray]:
        return backward(self)


def tensor(data, requires_grad: bool = False, dtype=None, name=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype, name=name)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _freeze(arr: np.ndarray):
    if arr.flags.writeable and arr.flags.owndata:
        arr.flags.writeable = False


def _make(out: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    t = Tensor(out)
    if _state.grad_enabled and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = tuple(parents)
        t._backward = backward_fn
        for p in parents:
            _freeze(p.data)
    return t


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Backpropagate from a scalar ``loss``.

    Gradients of leaf tensors that require them are accumulated into
    ``leaf.grad`` and also returned as a ``{leaf: grad}`` map.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[Tensor, np.ndarray] = {}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            leaves[node] = node.grad
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.shape:
                raise DimensionError(
                    f"internal: gradient shape {pg.shape} != input shape {parent.shape}"
                )
            prev = grads.get(id(parent))
            grads[id(parent)] = pg if prev is None else prev + pg
    return leaves


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def _binary_shapes(a: Tensor, b: Tensor, op: str) -> str:
    if a.shape == b.shape:
        return "same"
    if b.ndim == 0:
        return "scalar"
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        return "lastdim"
    raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _reduce_like(g: np.ndarray, mode: str, shape) -> np.ndarray:
    if mode == "same":
        return g
    if mode == "scalar":
        return np.asarray(g.sum(), dtype=g.dtype).reshape(shape)
    return g.reshape(-1, shape[0]).sum(axis=0)


def add(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    b = _as_tensor(b, a)
    mode = _binary_shapes(a, b, "add")
    out = a.data + b.data

    def _bw(g):
        return g, _reduce_like(g, mode, b.shape)

    return _make(out, (a, b), _bw)


def sub(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    mode = _binary_shapes(a, b, "sub")
    out = a.data - b.data

    def _bw(g):
        return g, -_reduce_like(g, mode, b.shape)

    return _make(out, (a, b), _bw)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    if not isinstance(b, Tensor):
        c = float(b)
        return _make(a.data * c, (a,), lambda g: (g * c,))
    mode = _binary_shapes(a, b, "mul")
    out = a.data * b.data

    def _bw(g):
        return g * b.data, _reduce_like(g * a.data, mode, b.shape)

    return _make(out, (a, b), _bw)


def scale_rows(x: Tensor, w: Tensor) -> Tensor:
    """Multiply each row ``x[..., i, :]`` by the scalar ``w[..., i]``."""
    if w.shape != x.shape[:-1]:
        raise DimensionError(f"scale_rows: weights {w.shape} do not match rows of {x.shape}")
    out = x.data * w.data[..., None]

    def _bw(g):
        return g * w.data[..., None], (g * x.data).sum(axis=-1)

    return _make(out, (x, w), _bw)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,))


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid_np(x.data)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),))


def _sigmoid_np(z: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 + 0.5 * np.tanh(0.5 * z)


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation: 0.5x(1 + tanh(sqrt(2/pi)(x + 0.044715x^3)))."""
    xd = x.data
    x2 = xd * xd
    t = np.tanh(_GELU_C * (xd + _GELU_A * x2 * xd))
    out = 0.5 * xd * (1.0 + t)

    def _bw(g):
        dinner = _GELU_C * (1.0 + 3.0 * _GELU_A * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return _make(out, (x,), _bw)


def masked_fill(x: Tensor, mask: np.ndarray, value: float) -> Tensor:
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape:
        raise DimensionError(f"masked_fill: mask {mask.shape} vs tensor {x.shape}")
    out = np.where(mask, np.asarray(value, dtype=x.dtype), x.data)
    return _make(out, (x,), lambda g: (np.where(mask, 0.0, g).astype(g.dtype),))


# ---------------------------------------------------------------------------
# shape
# ---------------------------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = x.data.reshape(shape)
    return _make(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = x.data.transpose(axes)
    return _make(out, (x,), lambda g: (g.transpose(inv),))


def broadcast_to(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError as exc:
        raise DimensionError(f"broadcast_to: cannot broadcast {x.shape} to {shape}") from exc
    lead = len(shape) - x.ndim
    axes = tuple(range(lead)) + tuple(
        i + lead for i, s in enumerate(x.shape) if s == 1 and shape[i + lead] != 1
    )

    def _bw(g):
        return (g.sum(axis=axes).reshape(x.shape),)

    return _make(out, (x,), _bw)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = list(xs)
    out = np.concatenate([x.data for x in xs], axis=axis)
    sizes = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def _bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make(out, xs, _bw)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def tsum(x: Tensor, axis=None) -> Tensor:
    out = np.asarray(x.data.sum(axis=axis))

    def _bw(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _make(out, (x,), _bw)


def mean(x: Tensor, axis=None) -> Tensor:
    count = x.data.size if axis is None else x.shape[axis]
    return mul(tsum(x, axis), 1.0 / count)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` is either 2-D (a shared weight, applied to every leading index of
    ``a``) or has exactly the same leading axes as ``a``.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2] or (b.ndim > 2 and a.shape[:-2] != b.shape[:-2]):
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    if not _matmul_suspended():
        record_macs(math.prod(a.shape) * b.shape[-1])
    out = a.data @ b.data

    def _bw(g):
        if b.ndim == 2:
            ga = g @ b.data.T
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            # einsum beats strided batched matmul for many tiny matrices
            ga = np.einsum("...ik,...jk->...ij", g, b.data)
            gb = np.einsum("...ki,...kj->...ij", a.data, g)
        return ga, gb

    return _make(out, (a, b), _bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not np.all(np.isfinite(x.data)):
        raise NumericInputError("softmax received non-finite input")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def _bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), _bw)


RMS_EPS = 1e-6


def rms_norm(x: Tensor, scale: Tensor) -> Tensor:
    """``x / sqrt(mean(x**2) + 1e-6) * scale`` over the last axis."""
    if scale.ndim != 1 or x.shape[-1] != scale.shape[0]:
        raise DimensionError(f"rms_norm: scale {scale.shape} vs input {x.shape}")
    xd = x.data
    inv = 1.0 / np.sqrt((xd * xd).mean(axis=-1, keepdims=True) + RMS_EPS)
    normed = xd * inv
    out = normed * scale.data

    def _bw(g):
        gs = (g * normed).reshape(-1, scale.shape[0]).sum(axis=0)
        gn = g * scale.data
        d = xd.shape[-1]
        gx = inv * (gn - normed * (gn * normed).sum(axis=-1, keepdims=True) / d)
        return gx, gs

    return _make(out, (x, scale), _bw)


def cross_entropy(logits: Tensor, targets, reduction: str = "mean") -> Tensor:
    """Softmax cross-entropy of ``logits[t, V]`` against integer ``targets[t]``."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= logits.shape[1]):
        raise IndexError("cross_entropy: target id out of range")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    rows = np.arange(targets.shape[0])
    total = -logp[rows, targets].sum()
    scale = 1.0 / max(targets.shape[0], 1) if reduction == "mean" else 1.0
    out = np.asarray(total * scale, dtype=logits.dtype)

    def _bw(g):
        p = np.exp(logp)
        p[rows, targets] -= 1.0
        return (p * (g * scale),)

    return _make(out, (logits,), _bw)


# ---------------------------------------------------------------------------
# indexing
# ---------------------------------------------------------------------------


def _check_index(idx: np.ndarray, n: int, op: str):
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"{op}: index out of range for {n} rows")


def gather_rows(x: Tensor, idx) -> Tensor:
    """Rows ``x[idx]`` along the second-to-last axis (first axis for 2-D)."""
    idx = np.asarray(idx, dtype=np.int64)
    _check_index(idx, x.shape[-2] if x.ndim >= 2 else x.shape[0], "gather_rows")
    axis = x.ndim - 2 if x.ndim >= 2 else 0
    out = np.take(x.data, idx, axis=axis)

    def _bw(g):
        gx = np.zeros_like(x.data)
        if axis == 0:
            np.add.at(gx, idx, g)
        else:
            np.add.at(gx, (slice(None),) * axis + (idx,), g)
        return (gx,)

    return _make(out, (x,), _bw)


def scatter_add_rows(dst: Tensor, idx, src: Tensor) -> Tensor:
    """``dst`` with ``src[j]`` added into row ``idx[j]`` (2-D tensors)."""
    idx = np.asarray(idx, dtype=np.int64)
    _check_index(idx, dst.shape[0], "scatter_add_rows")
    if src.shape != (idx.shape[0],) + dst.shape[1:]:
        raise DimensionError(f"scatter_add_rows: src {src.shape} vs idx {idx.shape} into {dst.shape}")
    out = dst.data.copy()
    np.add.at(out, idx, src.data)
    return _make(out, (dst, src), lambda g: (g, g[idx]))


def sliding_windows(x: Tensor, radius: int) -> tuple[Tensor, np.ndarray]:
    """Band view of ``x[..., n, c]`` as ``[..., n, 2r+1, c]``.

    Entry ``[..., i, j, :]`` is row ``i + j - radius``.  Rows outside
    ``[0, n)`` read as zeros; the returned boolean mask ``[n, 2r+1]`` marks
    the in-range ones so callers can exclude the rest.
    """
    n = x.shape[-2]
    w = 2 * radius + 1
    pos = np.arange(n)[:, None] + np.arange(-radius, radius + 1)[None, :]
    valid = (pos >= 0) & (pos < n)
    idx = np.clip(pos, 0, n - 1)
    axis = x.ndim - 2
    out = np.take(x.data, idx, axis=axis)
    out[..., ~valid, :] = 0

    def _bw(g):
        gx = np.zeros_like(x.data)
        for j in range(w):
            off = j - radius
            lo, hi = max(0, -off), min(n, n - off)
            if lo >= hi:
                continue
            gx[..., lo + off : hi + off, :] += g[..., lo:hi, j, :]
        return (gx,)

    return _make(out, (x,), _bw), valid


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def numerical_grad(
    f: Callable[[], float], x: Tensor, h: float = 1e-5, coords: Iterable[tuple] | None = None
) -> dict[tuple, float]:
    """Central differences of scalar ``f()`` w.r.t. selected entries of ``x``.

    ``x.data`` is swapped for perturbed copies and restored afterwards.
    """
    base = x.data
    out = {}
    if coords is None:
        coords = list(np.ndindex(*base.shape))
    for c in coords:
        plus = base.copy()
        plus[c] += h
        x.data = plus
        fp = f()
        minus = base.copy()
        minus[c] -= h
        x.data = minus
        fm = f()
        out[tuple(c)] = (fp - fm) / (2 * h)
    x.data = base
    return out


def grad_rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max absolute difference relative to the numeric gradient's scale."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(numeric).max(initial=0.0), np.abs(analytic).max(initial=0.0), 1e-12)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)
