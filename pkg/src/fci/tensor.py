"""Dense-tensor engine with reverse-mode automatic differentiation.

Every numeric primitive the models need lives here: a `Tensor` wrapping a
numpy array, a closure-per-op computation graph, and `backward` which sweeps
the graph in reverse topological order exactly once per node.

Arithmetic is float32 by default; pass ``dtype=np.float64`` when building
tensors for oracle or gradient checks. All reductions go through numpy,
whose reduction order is fixed for a given shape, so identical inputs yield
bit-identical outputs across runs.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, ContractError, NumericError, ShapeError

DEFAULT_DTYPE = np.float32

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (evaluation mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """N-dimensional array node in a reverse-mode differentiation graph.

    ``data`` is the value, ``grad`` the accumulated gradient (allocated on
    demand), ``_prev`` the input nodes and ``_backward`` the closure that
    routes ``grad`` to them. Leaf parameters are tensors with
    ``requires_grad=True`` and no inputs.
    """

    __slots__ = ("data", "requires_grad", "grad", "_prev", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._prev: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._op = "leaf"

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op}, grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, free_graph: bool = False) -> None:
        backward(self, free_graph=free_graph)

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, _wrap(other, self.dtype))

    def __radd__(self, other):
        return add(_wrap(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _wrap(other, self.dtype))

    def __mul__(self, other):
        return mul(self, _wrap(other, self.dtype))

    def __rmul__(self, other):
        return mul(_wrap(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, _wrap(other, self.dtype))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, prev: Sequence[Tensor], op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._prev = tuple(prev)
    out._backward = None
    out._op = op
    out.requires_grad = _grad_enabled and any(p.requires_grad for p in prev)
    if not out.requires_grad:
        out._prev = ()
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `g` down to `shape`, undoing numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def backward(loss: Tensor, free_graph: bool = False) -> None:
    """Accumulate reverse-mode gradients of `loss` into all reachable leaves.

    `loss` must be a scalar. Repeated calls without zeroing grads accumulate.
    With ``free_graph`` the saved intermediates are released as the sweep
    passes them (the graph cannot be backpropagated again afterwards).
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = build_tape(loss)
    if loss.grad is None:
        loss.grad = np.ones_like(loss.data)
    else:
        loss.grad = loss.grad + np.ones_like(loss.data)
    for node in reversed(tape):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
        # intermediate grads are only transport; free them eagerly
        if node._prev:
            node.grad = None
            if free_graph:
                node._backward = None
                node._prev = ()


def build_tape(root: Tensor) -> list[Tensor]:
    """Topologically ordered op records reachable from `root`.

    Inputs always precede their consumers; the reverse sweep therefore
    visits each record exactly once.
    """
    tape: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            tape.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._prev:
            if id(p) not in visited:
                stack.append((p, False))
    return tape


def assert_finite(t: Tensor | np.ndarray, what: str = "tensor") -> None:
    data = t.data if isinstance(t, Tensor) else t
    if not np.all(np.isfinite(data)):
        bad = int(np.size(data) - np.count_nonzero(np.isfinite(data)))
        raise NumericError(f"{what} contains {bad} non-finite values")


# -- elementwise arithmetic ---------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    out = _make(a.data + b.data, (a, b), "add")
    if out.requires_grad:
        def bwd(g):
            _accum(a, _unbroadcast(g, a.shape))
            _accum(b, _unbroadcast(g, b.shape))
        out._backward = bwd
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = _make(a.data - b.data, (a, b), "sub")
    if out.requires_grad:
        def bwd(g):
            _accum(a, _unbroadcast(g, a.shape))
            _accum(b, _unbroadcast(-g, b.shape))
        out._backward = bwd
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = _make(a.data * b.data, (a, b), "mul")
    if out.requires_grad:
        ad, bd = a.data, b.data
        def bwd(g):
            _accum(a, _unbroadcast(g * bd, a.shape))
            _accum(b, _unbroadcast(g * ad, b.shape))
        out._backward = bwd
    return out


def div(a: Tensor, b: Tensor) -> Tensor:
    out = _make(a.data / b.data, (a, b), "div")
    if out.requires_grad:
        ad, bd = a.data, b.data
        def bwd(g):
            _accum(a, _unbroadcast(g / bd, a.shape))
            _accum(b, _unbroadcast(-g * ad / (bd * bd), b.shape))
        out._backward = bwd
    return out


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    out = _make(a.data * np.asarray(s, dtype=a.dtype), (a,), "scale")
    if out.requires_grad:
        out._backward = lambda g: _accum(a, g * s)
    return out


def pow_scalar(a: Tensor, p: float) -> Tensor:
    """a ** p elementwise; caller guarantees the base stays positive for p < 1."""
    out = _make(a.data ** p, (a,), "pow")
    if out.requires_grad:
        ad = a.data
        out._backward = lambda g: _accum(a, g * p * ad ** (p - 1.0))
    return out


def exp(a: Tensor) -> Tensor:
    out = _make(np.exp(a.data), (a,), "exp")
    if out.requires_grad:
        y = out.data
        out._backward = lambda g: _accum(a, g * y)
    return out


def log(a: Tensor) -> Tensor:
    out = _make(np.log(a.data), (a,), "log")
    if out.requires_grad:
        ad = a.data
        out._backward = lambda g: _accum(a, g / ad)
    return out


def sigmoid(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        y = 1.0 / (1.0 + np.exp(-a.data))
    out = _make(y, (a,), "sigmoid")
    if out.requires_grad:
        out._backward = lambda g: _accum(a, g * y * (1.0 - y))
    return out


def silu(a: Tensor) -> Tensor:
    """x * sigmoid(x) elementwise."""
    with np.errstate(over="ignore"):
        s = 1.0 / (1.0 + np.exp(-a.data))
    out = _make(a.data * s, (a,), "silu")
    if out.requires_grad:
        ad = a.data
        # d/dx x*s(x) = s + x s (1-s)
        out._backward = lambda g: _accum(a, g * (s + ad * s * (1.0 - s)))
    return out


def softplus(a: Tensor) -> Tensor:
    out = _make(np.logaddexp(np.zeros((), dtype=a.dtype), a.data), (a,), "softplus")
    if out.requires_grad:
        ad = a.data
        def bwd(g):
            with np.errstate(over="ignore"):
                s = 1.0 / (1.0 + np.exp(-ad))
            _accum(a, g * s)
        out._backward = bwd
    return out


def clamp_min(a: Tensor, floor: float) -> Tensor:
    """Elementwise max(a, floor); gradient passes only through unclamped entries."""
    keep = a.data > floor
    out = _make(np.where(keep, a.data, np.asarray(floor, dtype=a.dtype)), (a,), "clamp_min")
    if out.requires_grad:
        out._backward = lambda g: _accum(a, g * keep)
    return out


def elu1p(a: Tensor) -> Tensor:
    """elu(x) + 1: strictly positive feature map used by kernel attention."""
    pos = a.data > 0
    with np.errstate(over="ignore"):
        e = np.exp(np.minimum(a.data, 0))
    y = np.where(pos, a.data + 1.0, e)
    out = _make(y.astype(a.dtype, copy=False), (a,), "elu1p")
    if out.requires_grad:
        d = np.where(pos, np.ones((), dtype=a.dtype), e).astype(a.dtype, copy=False)
        out._backward = lambda g: _accum(a, g * d)
    return out


# -- shape manipulation -------------------------------------------------------


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    out = _make(a.data.reshape(shape), (a,), "reshape")
    if out.requires_grad:
        orig = a.shape
        out._backward = lambda g: _accum(a, g.reshape(orig))
    return out


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    out = _make(np.ascontiguousarray(a.data.transpose(axes)), (a,), "transpose")
    if out.requires_grad:
        inv = tuple(np.argsort(axes))
        out._backward = lambda g: _accum(a, g.transpose(inv))
    return out


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    out = _make(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), "concat")
    if out.requires_grad:
        sizes = [p.shape[axis] for p in parts]
        splits = np.cumsum(sizes)[:-1]
        def bwd(g):
            for p, piece in zip(parts, np.split(g, splits, axis=axis)):
                _accum(p, piece)
        out._backward = bwd
    return out


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice `[start, start+length)` along `axis`."""
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = _make(np.ascontiguousarray(a.data[idx]), (a,), "narrow")
    if out.requires_grad:
        def bwd(g):
            full = np.zeros_like(a.data)
            full[idx] = g
            _accum(a, full)
        out._backward = bwd
    return out


def pad_axis(a: Tensor, axis: int, before: int, after: int) -> Tensor:
    width = [(0, 0)] * a.data.ndim
    width[axis] = (before, after)
    out = _make(np.pad(a.data, width), (a,), "pad")
    if out.requires_grad:
        idx = [slice(None)] * a.data.ndim
        idx[axis] = slice(before, before + a.shape[axis])
        idx = tuple(idx)
        out._backward = lambda g: _accum(a, g[idx])
    return out


def flip(a: Tensor, axis: int) -> Tensor:
    out = _make(np.ascontiguousarray(np.flip(a.data, axis=axis)), (a,), "flip")
    if out.requires_grad:
        out._backward = lambda g: _accum(a, np.flip(g, axis=axis))
    return out


# -- reductions ---------------------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), "sum")
    if out.requires_grad:
        shape, nd = a.shape, a.data.ndim
        def bwd(g):
            if axis is None:
                _accum(a, np.broadcast_to(g, shape).astype(a.dtype, copy=False))
                return
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            if not keepdims:
                g = np.expand_dims(g, tuple(ax % nd for ax in axes))
            _accum(a, np.broadcast_to(g, shape).astype(a.dtype, copy=False))
        out._backward = bwd
    return out


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# -- linear algebra -----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batch broadcasting on leading axes."""
    if a.data.ndim < 1 or b.data.ndim < 1:
        raise ShapeError("matmul operands must have rank >= 1")
    if a.shape[-1] != b.shape[-2 if b.data.ndim > 1 else 0]:
        raise ShapeError(f"matmul inner dims disagree: {a.shape} x {b.shape}")
    out = _make(np.matmul(a.data, b.data), (a, b), "matmul")
    if out.requires_grad:
        ad, bd = a.data, b.data
        def bwd(g):
            if a.requires_grad:
                ga = np.matmul(g, np.swapaxes(bd, -1, -2))
                _accum(a, _unbroadcast(ga, a.shape))
            if b.requires_grad:
                gb = np.matmul(np.swapaxes(ad, -1, -2), g)
                _accum(b, _unbroadcast(gb, b.shape))
        out._backward = bwd
    return out


# -- softmax / losses ---------------------------------------------------------


def softmax_rows(a: Tensor) -> Tensor:
    """Softmax over the last axis, max-shifted per row for stability."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)
    out = _make(y, (a,), "softmax")
    if out.requires_grad:
        def bwd(g):
            dot = (g * y).sum(axis=-1, keepdims=True)
            _accum(a, (g - dot) * y)
        out._backward = bwd
    return out


def log_softmax_rows(a: Tensor) -> Tensor:
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = _make(shifted - lse, (a,), "log_softmax")
    if out.requires_grad:
        sm = np.exp(out.data)
        def bwd(g):
            _accum(a, g - g.sum(axis=-1, keepdims=True) * sm)
        out._backward = bwd
    return out


def cross_entropy(logits: Tensor, target: int) -> Tensor:
    """-log softmax(logits)[target] for a single logit vector."""
    if logits.data.ndim != 1:
        raise ShapeError(f"cross_entropy expects a vector, got {logits.shape}")
    c = logits.shape[0]
    if not 0 <= target < c:
        raise IndexError(f"target {target} out of range for {c} classes")
    shifted = logits.data - logits.data.max()
    lse = np.log(np.exp(shifted).sum())
    out = _make(np.asarray(lse - shifted[target], dtype=logits.dtype), (logits,), "ce")
    if out.requires_grad:
        sm = np.exp(shifted - lse)
        def bwd(g):
            gl = sm * g
            gl[target] -= g
            _accum(logits, gl)
        out._backward = bwd
    return out


def cross_entropy_mean(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean -log softmax(logits[i])[targets[i]] over the batch axis."""
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy_mean expects (batch, classes), got {logits.shape}")
    n, c = logits.shape
    targets = np.asarray(targets)
    if targets.shape != (n,):
        raise ShapeError(f"targets shape {targets.shape} != ({n},)")
    if targets.min() < 0 or targets.max() >= c:
        raise IndexError("target index out of range")
    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1))
    picked = shifted[np.arange(n), targets]
    out = _make(np.asarray((lse - picked).mean(), dtype=logits.dtype), (logits,), "ce_mean")
    if out.requires_grad:
        sm = np.exp(shifted - lse[:, None])
        def bwd(g):
            gl = sm * (g / n)
            gl[np.arange(n), targets] -= g / n
            _accum(logits, gl.astype(logits.dtype, copy=False))
        out._backward = bwd
    return out


# -- gather / embedding -------------------------------------------------------


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup `table[ids]`; gradients scatter-add back into the table."""
    ids = np.asarray(ids)
    out = _make(table.data[ids], (table,), "embedding")
    if out.requires_grad:
        def bwd(g):
            if table.grad is None:
                table.grad = np.zeros_like(table.data)
            np.add.at(table.grad, ids, g)
        out._backward = bwd
    return out


def gather_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """out[b] = a[b, idx[b]] for a batch of row indices."""
    idx = np.asarray(idx)
    n = a.shape[0]
    if idx.shape != (n,):
        raise ShapeError(f"index shape {idx.shape} != ({n},)")
    rows = np.arange(n)
    out = _make(a.data[rows, idx], (a,), "gather_rows")
    if out.requires_grad:
        def bwd(g):
            full = np.zeros_like(a.data)
            np.add.at(full, (rows, idx), g)
            _accum(a, full)
        out._backward = bwd
    return out


# -- composite building blocks -------------------------------------------------


def rms_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Root-mean-square normalization over the last axis with scale/shift."""
    ms = tmean(mul(x, x), axis=-1, keepdims=True)
    inv = pow_scalar(add(ms, Tensor(np.asarray(eps, dtype=x.dtype))), -0.5)
    return add(mul(mul(x, inv), gain), bias)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    if b is not None:
        y = add(y, b)
    return y


def depthwise_conv1d(x: Tensor, kernel: Tensor, causal: bool = True) -> Tensor:
    """Per-channel 1-D convolution along the length axis.

    `x` is (..., L, d), `kernel` (w, d). Causal mode left-pads with w-1
    zeros so output t sees inputs t-w+1..t; non-causal mode centers the
    kernel and requires odd w.
    """
    w = kernel.shape[0]
    if w < 1:
        raise ShapeError("kernel width must be >= 1")
    if kernel.shape[-1] != x.shape[-1]:
        raise ShapeError(f"kernel channels {kernel.shape[-1]} != input channels {x.shape[-1]}")
    L = x.shape[-2]
    if causal:
        before, after = w - 1, 0
    else:
        if w % 2 == 0:
            raise ConfigError("non-causal depthwise conv requires odd kernel width")
        before = after = (w - 1) // 2
    xp = pad_axis(x, -2, before, after)
    out = None
    for tap in range(w):
        term = mul(narrow(xp, -2, tap, L), narrow(kernel, 0, tap, 1))
        out = term if out is None else add(out, term)
    return out


__all__ = [
    "Tensor", "no_grad", "grad_enabled", "backward", "build_tape",
    "assert_finite", "add", "sub", "mul", "div", "scale", "pow_scalar",
    "exp", "log", "sigmoid", "silu", "softplus", "elu1p", "clamp_min", "reshape",
    "transpose", "concat", "narrow", "pad_axis", "flip", "tsum", "tmean",
    "matmul", "softmax_rows", "log_softmax_rows", "cross_entropy",
    "cross_entropy_mean", "embedding", "gather_rows", "rms_norm", "linear",
    "depthwise_conv1d", "DEFAULT_DTYPE",
]
