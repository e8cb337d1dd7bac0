"""Dense tensors with reverse-mode automatic differentiation.

Every operation the network needs is defined here as a pure function on
``Tensor`` values. Forward results are numpy arrays; when gradients are
enabled, each op records a closure that routes the upstream gradient to its
inputs. ``backward()`` walks the recorded graph once in reverse topological
order and accumulates gradients additively.

Conventions:
  - float32 is the working precision; float64 exists for gradient checking.
  - Elementwise binary ops broadcast over *leading* dimensions only (a
    missing or size-1 leading axis). Anything else needs an explicit
    ``reshape``/``expand``. This keeps gradient bookkeeping trivially
    auditable.
  - Tensors are never mutated by ops; only ``grad`` accumulates.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DimensionError, GraphError, NumericsError

DEFAULT_DTYPE = np.float32

_grad_enabled = True
_check_finite = False


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference fast path)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def set_debug_checks(enabled: bool) -> None:
    """Toggle NaN/Inf checking after every forward op (slow; for tests)."""
    global _check_finite
    _check_finite = bool(enabled)


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype not in (np.float32, np.float64):
        return arr.astype(DEFAULT_DTYPE)
    return arr


class Tensor:
    """N-dimensional float array, optionally tracked on the gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        req = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}{req})"

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.copy() if not g.flags.owndata else g
        else:
            self.grad = self.grad + g

    def backward(self) -> None:
        """Populate ``grad`` for every reachable tensor with requires_grad.

        Gradients accumulate additively; call ``zero_grad`` on parameters
        between steps.
        """
        if self.size != 1:
            raise GraphError(
                f"backward() needs a scalar loss, got shape {self.shape}"
            )
        # Iterative topological order; graphs are deep enough (stacked
        # encoder layers) that recursion would be fragile.
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node._accumulate(g)
            if node._backward is None:
                continue
            for parent, pg in node._backward(g):
                if not (parent.requires_grad or parent._backward or parent._parents):
                    continue
                pid = id(parent)
                if pid in grads:
                    grads[pid] = grads[pid] + pg
                else:
                    grads[pid] = pg

    # operator sugar -------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_wrap(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_wrap(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def transpose(self, *axes):
        return transpose(self, *axes)

    def expand(self, *shape):
        return expand(self, *shape)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)


def _wrap(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else DEFAULT_DTYPE))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    """Assemble an op result, recording the tape edge when grads are on."""
    if _check_finite and not np.all(np.isfinite(data)):
        raise NumericsError(f"non-finite values in op output (shape {data.shape})")
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad or p._parents or p._backward for p in parents):
        out.requires_grad = any(p.requires_grad for p in parents)
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _check_leading_broadcast(a: Tensor, b: Tensor, opname: str) -> None:
    """Permit broadcasting only over missing/size-1 leading axes."""
    sa, sb = a.shape, b.shape
    n = min(len(sa), len(sb))
    for k in range(1, n + 1):
        da, db = sa[-k], sb[-k]
        if da == db:
            continue
        if da != 1 and db != 1:
            raise DimensionError(f"{opname}: incompatible shapes {sa} and {sb}")
        # The size-1 side must be all ones from this axis leftward, so the
        # broadcast stays leading; anything else needs an explicit expand().
        small = sa if da == 1 else sb
        if any(d != 1 for d in small[: len(small) - k + 1]):
            raise DimensionError(
                f"{opname}: only leading-dimension broadcast is supported, "
                f"got {sa} and {sb} (use expand/reshape)"
            )


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# elementwise binary ------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_leading_broadcast(a, b, "add")

    def backward(g):
        return ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape)))

    return _make(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_leading_broadcast(a, b, "sub")

    def backward(g):
        return ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(-g, b.shape)))

    return _make(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_leading_broadcast(a, b, "mul")

    def backward(g):
        return (
            (a, _unbroadcast(g * b.data, a.shape)),
            (b, _unbroadcast(g * a.data, b.shape)),
        )

    return _make(a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_leading_broadcast(a, b, "div")

    def backward(g):
        ga = g / b.data
        gb = -g * a.data / (b.data * b.data)
        return ((a, _unbroadcast(ga, a.shape)), (b, _unbroadcast(gb, b.shape)))

    return _make(a.data / b.data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    def backward(g):
        return ((a, -g),)

    return _make(-a.data, (a,), backward)


def power(a: Tensor, p: float) -> Tensor:
    p = float(p)

    def backward(g):
        return ((a, g * p * a.data ** (p - 1.0)),)

    return _make(a.data**p, (a,), backward)


# elementwise unary -------------------------------------------------------


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def backward(g):
        return ((a, g * out_data),)

    return _make(out_data, (a,), backward)


def log(a: Tensor) -> Tensor:
    def backward(g):
        return ((a, g / a.data),)

    return _make(np.log(a.data), (a,), backward)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def backward(g):
        return ((a, g * mask),)

    return _make(np.where(mask, a.data, 0), (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    # Stable in both tails: exp of a non-positive argument only.
    x = a.data
    z = np.exp(-np.abs(x))
    out_data = np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    out_data = out_data.astype(x.dtype, copy=False)

    def backward(g):
        return ((a, g * out_data * (1.0 - out_data)),)

    return _make(out_data, (a,), backward)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    mask = (a.data >= lo) & (a.data <= hi)

    def backward(g):
        return ((a, g * mask),)

    return _make(np.clip(a.data, lo, hi), (a,), backward)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    if not -a.ndim <= axis < a.ndim:
        raise DimensionError(f"softmax: axis {axis} out of range for shape {a.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        return ((a, (g - dot) * out_data),)

    return _make(out_data, (a,), backward)


# linear algebra ----------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(
            f"matmul needs >=2-D operands, got {a.shape} and {b.shape}"
        )
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            f"matmul: inner dimensions disagree, {a.shape} x {b.shape}"
        )
    _check_leading_broadcast_batch(a.shape[:-2], b.shape[:-2], a.shape, b.shape)

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ((a, ga), (b, gb))

    return _make(a.data @ b.data, (a, b), backward)


def _check_leading_broadcast_batch(ba, bb, sa, sb):
    n = min(len(ba), len(bb))
    for k in range(1, n + 1):
        if ba[-k] != bb[-k] and 1 not in (ba[-k], bb[-k]):
            raise DimensionError(f"matmul: batch dims disagree, {sa} x {sb}")


# reductions --------------------------------------------------------------


def _norm_axes(axis, ndim) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    out_data = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        gb = g
        if not keepdims:
            gb = np.expand_dims(gb, axes)
        return ((a, np.broadcast_to(gb, a.shape).copy()),)

    return _make(out_data, (a,), backward)


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    out_data = a.data.mean(axis=axes, keepdims=keepdims)

    def backward(g):
        gb = g
        if not keepdims:
            gb = np.expand_dims(gb, axes)
        return ((a, np.broadcast_to(gb, a.shape) / count),)

    return _make(out_data, (a,), backward)


# shape manipulation ------------------------------------------------------


def reshape(a: Tensor, *shape) -> Tensor:
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    old_shape = a.shape

    def backward(g):
        return ((a, g.reshape(old_shape)),)

    try:
        out_data = a.data.reshape(shape)
    except ValueError as e:
        raise DimensionError(f"reshape: cannot view {old_shape} as {shape}") from e
    return _make(out_data, (a,), backward)


def transpose(a: Tensor, *axes) -> Tensor:
    if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
        axes = tuple(axes[0])
    if not axes:
        axes = tuple(reversed(range(a.ndim)))
    if sorted(axes) != list(range(a.ndim)):
        raise DimensionError(f"transpose: bad axes {axes} for shape {a.shape}")
    inverse = np.argsort(axes)

    def backward(g):
        return ((a, g.transpose(inverse)),)

    return _make(a.data.transpose(axes), (a,), backward)


def expand(a: Tensor, *shape) -> Tensor:
    """Explicit broadcast to ``shape``; the gradient sums over new axes."""
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    try:
        out_data = np.broadcast_to(a.data, shape)
    except ValueError as e:
        raise DimensionError(f"expand: cannot broadcast {a.shape} to {shape}") from e

    def backward(g):
        return ((a, _unbroadcast(g, a.shape)),)

    return _make(np.ascontiguousarray(out_data), (a,), backward)


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    ts = [_wrap(t) for t in tensors]
    if not ts:
        raise DimensionError("concat: empty input list")
    axis = axis % ts[0].ndim
    for t in ts[1:]:
        if t.ndim != ts[0].ndim or any(
            i != axis and d != e for i, (d, e) in enumerate(zip(t.shape, ts[0].shape))
        ):
            raise DimensionError(
                f"concat: shapes {[t.shape for t in ts]} disagree off axis {axis}"
            )
    sizes = [t.shape[axis] for t in ts]
    offsets = np.cumsum(sizes)[:-1]

    def backward(g):
        pieces = np.split(g, offsets, axis=axis)
        return tuple((t, piece) for t, piece in zip(ts, pieces))

    return _make(np.concatenate([t.data for t in ts], axis=axis), ts, backward)


# spatial ops -------------------------------------------------------------


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation over [B,C,H,W] with [Cout,Cin,kh,kw] weights.

    Output size must divide exactly: (H + 2*padding - kh) % stride == 0.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d: need 4-D input/weight, got {x.shape}, {w.shape}")
    B, C, H, W = x.shape
    Cout, Cin, kh, kw = w.shape
    if C != Cin:
        raise DimensionError(f"conv2d: input channels {C} != weight channels {Cin}")
    Hp, Wp = H + 2 * padding, W + 2 * padding
    if kh > Hp or kw > Wp:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} larger than padded input {Hp}x{Wp}")
    if (Hp - kh) % stride or (Wp - kw) % stride:
        raise DimensionError(
            f"conv2d: stride {stride} does not fit input {H}x{W} with "
            f"kernel {kh}x{kw}, padding {padding}"
        )
    OH, OW = (Hp - kh) // stride + 1, (Wp - kw) // stride + 1
    if OH <= 0 or OW <= 0:
        raise DimensionError(f"conv2d: non-positive output size {OH}x{OW}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # [B,C,OH,OW,kh,kw]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(
        B, OH * OW, C * kh * kw
    )
    wmat = w.data.reshape(Cout, C * kh * kw).T
    out2 = cols @ wmat  # [B, OH*OW, Cout]
    if b is not None:
        if b.shape != (Cout,):
            raise DimensionError(f"conv2d: bias shape {b.shape}, expected ({Cout},)")
        out2 = out2 + b.data
    out_data = out2.transpose(0, 2, 1).reshape(B, Cout, OH, OW)

    def backward(g):
        g2 = g.reshape(B, Cout, OH * OW).transpose(0, 2, 1)  # [B,L,Cout]
        gw = np.matmul(cols.transpose(0, 2, 1), g2).sum(axis=0).T.reshape(w.shape)
        gcols = g2 @ wmat.T  # [B, L, C*kh*kw]
        gcols = gcols.reshape(B, OH, OW, C, kh, kw).transpose(0, 3, 4, 5, 1, 2)
        gxp = np.zeros((B, C, Hp, Wp), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + stride * OH : stride,
                    j : j + stride * OW : stride] += gcols[:, :, i, j]
        gx = gxp[:, :, padding : padding + H, padding : padding + W]
        grads = [(x, gx), (w, gw)]
        if b is not None:
            grads.append((b, g2.sum(axis=(0, 1))))
        return tuple(grads)

    parents = (x, w) if b is None else (x, w, b)
    return _make(out_data, parents, backward)


def maxpool2d(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; spatial dims must be even."""
    if x.ndim != 4:
        raise DimensionError(f"maxpool2d: need 4-D input, got {x.shape}")
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise DimensionError(f"maxpool2d: spatial size {H}x{W} not even")
    h2, w2 = H // 2, W // 2
    win = x.data.reshape(B, C, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(B, C, h2, w2, 4)
    idx = win.argmax(axis=-1)
    out_data = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gwin = np.zeros((B, C, h2, w2, 4), dtype=g.dtype)
        np.put_along_axis(gwin, idx[..., None], g[..., None], axis=-1)
        gx = gwin.reshape(B, C, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return ((x, gx.reshape(B, C, H, W)),)

    return _make(out_data, (x,), backward)


def nearest_upsample(x: Tensor, factor: int) -> Tensor:
    """Repeat each spatial cell ``factor`` times along H and W."""
    if x.ndim != 4:
        raise DimensionError(f"nearest_upsample: need 4-D input, got {x.shape}")
    if factor < 1:
        raise DimensionError(f"nearest_upsample: factor must be >=1, got {factor}")
    if factor == 1:
        return reshape(x, x.shape)
    B, C, H, W = x.shape
    out_data = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def backward(g):
        gx = g.reshape(B, C, H, factor, W, factor).sum(axis=(3, 5))
        return ((x, gx),)

    return _make(out_data, (x,), backward)


def dropout(x: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when rng is None (eval mode) or p == 0."""
    if not 0.0 <= p < 1.0:
        raise DimensionError(f"dropout: p must be in [0,1), got {p}")
    if rng is None or p == 0.0:
        return reshape(x, x.shape)
    mask = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)

    def backward(g):
        return ((x, g * mask),)

    return _make(x.data * mask, (x,), backward)
