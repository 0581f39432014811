"""Reverse-mode automatic differentiation over dense numpy arrays.

Every operation records its parents and a backward closure on the output
tensor.  Nodes carry a monotonically increasing sequence number, so sorting
the reachable nodes by that number (descending) is a valid reverse
topological order.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

_seq = itertools.count()
_grad_enabled = True


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class ConfigError(ValueError):
    """Raised when an operation is configured with impossible parameters."""


class GraphError(RuntimeError):
    """Raised on misuse of the computation graph (e.g. double backward)."""


@contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "_seq", "_freed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype != np.float32 and arr.dtype != np.float64:
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op = ""
        self._seq = next(_seq)
        self._freed = False

    # -- basic properties -------------------------------------------------
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", op={self._op}" if self._op else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{tag})"

    # -- autodiff ---------------------------------------------------------
    def backward(self) -> None:
        """Populate ``.grad`` on every tensor reachable from this scalar.

        The graph is released afterwards; a second call on the same loss
        raises :class:`GraphError`.
        """
        if self.data.size != 1 or self.data.ndim > 1:
            raise ShapeError(f"backward requires a scalar loss, got shape {self.shape}")
        if self._freed:
            raise GraphError("backward called twice on the same graph; rebuild the forward pass")
        if not self.requires_grad:
            raise GraphError("loss does not require grad; nothing is connected to it")

        nodes = []
        seen = set()
        stack = [self]
        while stack:
            node = stack.pop()
            if id(node) in seen:
                continue
            seen.add(id(node))
            nodes.append(node)
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append(p)
        nodes.sort(key=lambda t: t._seq, reverse=True)

        _accumulate(self, np.ones_like(self.data))
        for node in nodes:
            if node._backward is None or node.grad is None:
                continue
            grads = node._backward(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is not None and parent.requires_grad:
                    _accumulate(parent, g)
        for node in nodes:
            if node._backward is not None:
                node._backward = None
                node._parents = ()
                node._freed = True

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return tmax(self, axis, keepdims)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if g.shape != t.data.shape:
        g = np.broadcast_to(g, t.data.shape)
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def _wrap(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float32))


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward: Callable, op: str) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
        out._op = op
    return out


def _binary_operands(a, b, op: str) -> tuple[Tensor, Tensor]:
    """Coerce operands; allow only identical shapes or a scalar side."""
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        raise TypeError(f"{op}: at least one operand must be a Tensor")
    if not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    if a.shape != b.shape and a.data.ndim != 0 and b.data.ndim != 0:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ; only scalar broadcasting is allowed")
    return a, b


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    # only the scalar-vs-tensor case reaches here
    return np.asarray(g.sum()).reshape(shape)


# -- elementwise binary ----------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "add")

    def backward(g):
        return (_reduce_to(g, a.shape) if a.requires_grad else None,
                _reduce_to(g, b.shape) if b.requires_grad else None)

    return _result(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "sub")

    def backward(g):
        return (_reduce_to(g, a.shape) if a.requires_grad else None,
                _reduce_to(-g, b.shape) if b.requires_grad else None)

    return _result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "mul")

    def backward(g):
        return (_reduce_to(g * b.data, a.shape) if a.requires_grad else None,
                _reduce_to(g * a.data, b.shape) if b.requires_grad else None)

    return _result(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "div")

    def backward(g):
        ga = _reduce_to(g / b.data, a.shape) if a.requires_grad else None
        gb = _reduce_to(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data / b.data, (a, b), backward, "div")


def power(a: Tensor, p: float) -> Tensor:
    if isinstance(p, Tensor):
        raise TypeError("power: exponent must be a Python number")
    a = _wrap(a)

    def backward(g):
        return (g * p * a.data ** (p - 1),)

    return _result(a.data ** p, (a,), backward, "pow")


# -- elementwise unary -----------------------------------------------------
def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def backward(g):
        return (g * out_data,)

    return _result(out_data, (a,), backward, "exp")


def log(a: Tensor) -> Tensor:
    if a.size == 0:
        raise ShapeError("log of an empty tensor")

    def backward(g):
        return (g / a.data,)

    return _result(np.log(a.data), (a,), backward, "log")


def tabs(a: Tensor) -> Tensor:
    def backward(g):
        return (g * np.sign(a.data),)

    return _result(np.abs(a.data), (a,), backward, "abs")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign for overflow safety
    e = np.exp(-np.abs(x))
    out_data = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)

    def backward(g):
        return (g * out_data * (1.0 - out_data),)

    return _result(out_data, (a,), backward, "sigmoid")


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(x)), computed stably."""
    x = a.data
    out_data = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))

    def backward(g):
        e = np.exp(-np.abs(x))
        s = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
        return (g * s,)

    return _result(out_data, (a,), backward, "softplus")


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    x2 = x * x
    inner = _GELU_C * x * (1.0 + 0.044715 * x2)
    t = np.tanh(inner)
    out_data = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _result(out_data, (a,), backward, "gelu")


# -- reductions --------------------------------------------------------------
def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    out_data = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    return _result(np.asarray(out_data), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    if count == 0:
        raise ShapeError("mean over an empty axis")
    out_data = a.data.mean(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape),)

    return _result(np.asarray(out_data), (a,), backward, "mean")


def tmax(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    if any(a.shape[ax] == 0 for ax in axes):
        raise ShapeError("max over an empty axis")
    kept = a.data.max(axis=axes, keepdims=True)
    out_data = kept if keepdims else np.squeeze(kept, axis=axes)

    def backward(g):
        hit = (a.data == kept).astype(a.dtype)
        hit /= hit.sum(axis=axes, keepdims=True)
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (hit * g,)

    return _result(np.asarray(out_data), (a,), backward, "max")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    if a.shape[axis] == 0:
        raise ShapeError("softmax over an empty axis")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        return (out_data * (g - dot),)

    return _result(out_data, (a,), backward, "softmax")


def layer_norm(a: Tensor, weight: Tensor | None = None, bias: Tensor | None = None,
               eps: float = 1e-5, axis: int = -1) -> Tensor:
    """Normalise over one axis, then apply an optional per-feature affine map."""
    axis = axis % a.ndim
    n = a.shape[axis]
    if n == 0:
        raise ShapeError("layer_norm over an empty axis")
    x = a.data
    mu = x.mean(axis=axis, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    bshape = [1] * a.ndim
    bshape[axis] = n
    out_data = xhat
    if weight is not None:
        out_data = out_data * weight.data.reshape(bshape)
    if bias is not None:
        out_data = out_data + bias.data.reshape(bshape)
    red = tuple(i for i in range(a.ndim) if i != axis)

    def backward(g):
        gw = gb = None
        if weight is not None and weight.requires_grad:
            gw = (g * xhat).sum(axis=red)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=red)
        gx = None
        if a.requires_grad:
            gxh = g * weight.data.reshape(bshape) if weight is not None else g
            gx = inv * (gxh - gxh.mean(axis=axis, keepdims=True)
                        - xhat * (gxh * xhat).mean(axis=axis, keepdims=True))
        return gx, gw, gb

    parents = (a,
               weight if weight is not None else Tensor(np.zeros(0, a.dtype)),
               bias if bias is not None else Tensor(np.zeros(0, a.dtype)))
    return _result(out_data, parents, backward, "layer_norm")


# -- linear algebra -----------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of 2-D tensors, or batched over identical leading dims."""
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2 or a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2] \
            or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(a.data, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return _result(a.data @ b.data, (a, b), backward, "matmul")


# -- shape manipulation -------------------------------------------------------
def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out_data = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from exc

    def backward(g):
        return (g.reshape(a.shape),)

    return _result(out_data, (a,), backward, "reshape")


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inv),)

    return _result(np.transpose(a.data, axes), (a,), backward, "transpose")


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    """Explicit numpy-style broadcast; the only broadcasting the core permits."""
    shape = tuple(shape)
    try:
        out_data = np.broadcast_to(a.data, shape)
    except ValueError as exc:
        raise ShapeError(f"broadcast_to: cannot broadcast {a.shape} to {shape}") from exc
    lead = len(shape) - a.ndim
    axes = tuple(range(lead)) + tuple(
        lead + i for i, d in enumerate(a.shape) if d == 1 and shape[lead + i] != 1)

    def backward(g):
        return (g.sum(axis=axes, keepdims=True).reshape(a.shape) if axes else g,)

    return _result(out_data, (a,), backward, "broadcast_to")


def getitem(a: Tensor, idx) -> Tensor:
    out_data = a.data[idx]
    parts = idx if isinstance(idx, tuple) else (idx,)
    basic = all(isinstance(p, (slice, int, type(Ellipsis), type(None))) for p in parts)

    def backward(g):
        full = np.zeros_like(a.data)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _result(np.array(out_data, copy=True), (a,), backward, "getitem")


def take(a: Tensor, indices: np.ndarray, axis: int = 0) -> Tensor:
    """Gather along ``axis`` with an integer index array (repeats allowed)."""
    indices = np.asarray(indices, dtype=np.intp)
    out_data = np.take(a.data, indices, axis=axis)

    def backward(g):
        full = np.zeros_like(a.data)
        moved = np.moveaxis(full, axis, 0)
        gm = np.moveaxis(g, list(range(axis, axis + indices.ndim)), list(range(indices.ndim)))
        np.add.at(moved, indices, gm)
        return (full,)

    return _result(out_data, (a,), backward, "take")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    axis = axis % tensors[0].ndim
    sizes = [t.shape[axis] for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(out_data, tensors, backward, "concat")


def pad(a: Tensor, pad_width: Sequence[tuple[int, int]], value: float = 0.0) -> Tensor:
    pad_width = tuple(tuple(p) for p in pad_width)
    out_data = np.pad(a.data, pad_width, constant_values=value)
    sl = tuple(slice(lo, lo + n) for (lo, _), n in zip(pad_width, a.shape))

    def backward(g):
        return (g[sl],)

    return _result(out_data, (a,), backward, "pad")


def roll(a: Tensor, shift, axis) -> Tensor:
    def backward(g):
        neg = tuple(-s for s in shift) if isinstance(shift, (tuple, list)) else -shift
        return (np.roll(g, neg, axis=axis),)

    return _result(np.roll(a.data, shift, axis=axis), (a,), backward, "roll")


# -- convolution and sub-pixel rearrangement ----------------------------------------
def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation. x: [B,C,H,W], w: [O,C,kh,kw], b: [O]."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and kernel, got {x.shape} and {w.shape}")
    B, C, H, W = x.shape
    O, Cw, kh, kw = w.shape
    if C != Cw:
        raise ShapeError(f"conv2d: input channels {C} do not match kernel {w.shape}")
    Hp, Wp = H + 2 * padding, W + 2 * padding
    if kh > Hp or kw > Wp:
        raise ConfigError(f"conv2d: kernel {kh}x{kw} does not fit padded input {Hp}x{Wp}")
    if (Hp - kh) % stride or (Wp - kw) % stride:
        raise ConfigError(f"conv2d: output size ({Hp}-{kh})/{stride}+1 is not integral")
    Ho, Wo = (Hp - kh) // stride + 1, (Wp - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # [B, Ho, Wo, C, kh, kw]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(B * Ho * Wo, C * kh * kw)
    wmat = w.data.reshape(O, C * kh * kw)
    out = cols @ wmat.T
    if b is not None:
        out += b.data
    out_data = np.ascontiguousarray(out.reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2))

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, O)
        gw = (g2.T @ cols).reshape(w.shape) if w.requires_grad else None
        gb = g2.sum(axis=0) if (b is not None and b.requires_grad) else None
        gx = None
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(B, Ho, Wo, C, kh, kw)
            gxp = np.zeros((B, C, Hp, Wp), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += \
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding:padding + H, padding:padding + W] if padding else gxp
        return gx, gw, gb

    parents = (x, w, b if b is not None else Tensor(np.zeros(0, x.dtype)))
    return _result(out_data, parents, backward, "conv2d")


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """[B, C*r*r, H, W] -> [B, C, H*r, W*r]."""
    B, Cr, H, W = x.shape
    if Cr % (r * r):
        raise ConfigError(f"pixel_shuffle: {Cr} channels not divisible by r^2={r * r}")
    C = Cr // (r * r)
    out_data = x.data.reshape(B, C, r, r, H, W).transpose(0, 1, 4, 2, 5, 3).reshape(B, C, H * r, W * r)

    def backward(g):
        return (_unshuffle(g, r),)

    return _result(out_data, (x,), backward, "pixel_shuffle")


def _unshuffle(a: np.ndarray, r: int) -> np.ndarray:
    B, C, Hr, Wr = a.shape
    H, W = Hr // r, Wr // r
    return a.reshape(B, C, H, r, W, r).transpose(0, 1, 3, 5, 2, 4).reshape(B, C * r * r, H, W)


def pixel_unshuffle(x: Tensor, r: int) -> Tensor:
    """Inverse of :func:`pixel_shuffle`."""
    B, C, Hr, Wr = x.shape
    if Hr % r or Wr % r:
        raise ConfigError(f"pixel_unshuffle: spatial size {Hr}x{Wr} not divisible by {r}")

    def backward(g):
        B_, Cr, H, W = g.shape
        return (g.reshape(B_, C, r, r, H, W).transpose(0, 1, 4, 2, 5, 3).reshape(B_, C, H * r, W * r),)

    return _result(_unshuffle(x.data, r), (x,), backward, "pixel_unshuffle")
