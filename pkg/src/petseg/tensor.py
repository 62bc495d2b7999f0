"""A small reverse-mode autodiff engine over numpy arrays.

Only the primitives the segmentation network needs are provided. Every op
takes and returns :class:`Tensor`; the backward rule of each op is a closure
returning one gradient per parent (``None`` for parents that do not need one).

Gradients are written to leaf tensors (those created directly rather than by
an op); intermediate gradients are dropped as soon as they have been
propagated.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from . import _kernels

__all__ = [
    "Tensor",
    "GraphError",
    "ShapeError",
    "no_grad",
    "is_grad_enabled",
    "backward",
    "add",
    "mul",
    "scale",
    "tsum",
    "mean",
    "stack_mean",
    "leaky_relu",
    "sigmoid",
    "conv3d",
    "instance_norm",
    "trilinear_upsample",
    "channel_concat",
    "bce_with_logits",
    "soft_dice_loss",
]


class GraphError(RuntimeError):
    """Raised on misuse of the autodiff graph (e.g. a second backward pass)."""


class ShapeError(ValueError):
    """Shape mismatch between operands; ``axis`` names the offending axis."""

    def __init__(self, message: str, axis: str | int | None = None):
        super().__init__(message)
        self.axis = axis


_grad_enabled = True


def is_grad_enabled() -> bool:
    return _grad_enabled


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference / validation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_leaf", "_consumed", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._leaf = True
        self._consumed = False
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self, inputs: Iterable["Tensor"] = ()) -> None:
        backward(self, inputs)

    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    __radd__ = __add__

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out._leaf = False
    return out


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


def backward(loss: Tensor, inputs: Iterable[Tensor] = ()) -> None:
    """Populate ``grad`` on every leaf reachable from the scalar ``loss``.

    Leaf gradients accumulate into an existing ``grad``. Tensors listed in
    ``inputs`` that the loss does not depend on receive a zero gradient.
    The graph is consumed: a second call raises :class:`GraphError`.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise GraphError("backward called twice on the same graph")
    if not loss.requires_grad:
        raise GraphError("loss does not depend on any tensor requiring grad")
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node._leaf:
            if g is not None:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        if node._consumed or node._backward is None:
            raise GraphError("graph already consumed by a previous backward pass")
        if g is not None:
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        node._backward = None
        node._parents = ()
        node._consumed = True
    for t in inputs:
        if t.grad is None:
            t.grad = np.zeros_like(t.data)


# -- elementwise and reductions ----------------------------------------------


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        axis = next((i for i, (x, y) in enumerate(zip(a.shape, b.shape)) if x != y), "ndim")
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ at axis {axis}", axis)


def add(x: Tensor, y: Tensor) -> Tensor:
    _check_same_shape(x, y, "add")
    return _result(x.data + y.data, (x, y), lambda g: (g, g))


def mul(x: Tensor, y: Tensor) -> Tensor:
    _check_same_shape(x, y, "mul")
    xd, yd = x.data, y.data
    return _result(xd * yd, (x, y), lambda g: (g * yd, g * xd))


def scale(x: Tensor, c: float) -> Tensor:
    return _result(x.data * c, (x,), lambda g: (g * c,))


def tsum(x: Tensor) -> Tensor:
    shape, dtype = x.shape, x.dtype
    return _result(np.asarray(x.data.sum(), dtype=dtype), (x,), lambda g: (np.full(shape, g, dtype=dtype),))


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    return scale(tsum(x), 1.0 / n)


def stack_mean(xs: Sequence[Tensor]) -> Tensor:
    """Mean of equally-shaped tensors."""
    if not xs:
        raise ValueError("stack_mean of an empty sequence")
    for t in xs[1:]:
        _check_same_shape(xs[0], t, "stack_mean")
    k = len(xs)
    data = sum(t.data for t in xs[1:]) + xs[0].data
    return _result(data / k, tuple(xs), lambda g: tuple(g / k for _ in range(k)))


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    pos = x.data > 0
    out = np.where(pos, x.data, x.data * slope)
    return _result(out, (x,), lambda g: (np.where(pos, g, g * slope),))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return _result(s, (x,), lambda g: (g * s * (1.0 - s),))


# -- layers -------------------------------------------------------------------


def _triple(v) -> tuple[int, int, int]:
    if isinstance(v, int):
        return (v, v, v)
    t = tuple(int(a) for a in v)
    if len(t) != 3:
        raise ValueError(f"expected a triple, got {v!r}")
    return t


def conv3d(x: Tensor, weight: Tensor, bias: Tensor, stride=1, padding=0) -> Tensor:
    """3D cross-correlation (no kernel flip) with zero padding.

    ``x`` is ``[N, Cin, D, H, W]``, ``weight`` is ``[Cout, Cin, kd, kh, kw]``.
    """
    stride, padding = _triple(stride), _triple(padding)
    if x.ndim != 5:
        raise ShapeError(f"conv3d input must be 5D, got shape {x.shape}", "ndim")
    if weight.ndim != 5:
        raise ShapeError(f"conv3d weight must be 5D, got shape {weight.shape}", "ndim")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv3d: input has {x.shape[1]} channels, weight expects {weight.shape[1]}", "Cin")
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"conv3d: bias shape {bias.shape} does not match Cout={weight.shape[0]}", "Cout")
    if min(stride) < 1:
        raise ValueError(f"conv3d stride must be >= 1, got {stride}")
    for i, axis in enumerate("DHW"):
        if x.shape[2 + i] + 2 * padding[i] < weight.shape[2 + i]:
            raise ShapeError(f"conv3d: padded extent along {axis} is smaller than the kernel", axis)
    xd, wd = x.data, weight.data
    out, ctx = _kernels.conv3d_forward(xd, wd, bias.data, stride, padding)
    x_shape = x.shape

    def _bw(g):
        gx, gw, gb = _kernels.conv3d_backward(ctx, x_shape, wd, g, stride, padding, need_input_grad=x.requires_grad)
        return gx, gw, gb

    return _result(out, (x, weight, bias), _bw)


def instance_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each (sample, channel) slice over its spatial axes, then scale and shift.

    Uses the population variance of the slice.
    """
    if x.ndim < 3:
        raise ShapeError(f"instance_norm needs [N, C, ...], got {x.shape}", "ndim")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"instance_norm: affine params must have shape ({c},)", "C")
    axes = tuple(range(2, x.ndim))
    bshape = (1, c) + (1,) * (x.ndim - 2)
    mu = x.data.mean(axis=axes, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=axes, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv_std
    gmm = gamma.data.reshape(bshape)
    out = xhat * gmm + beta.data.reshape(bshape)

    def _bw(g):
        gbeta = g.sum(axis=(0,) + axes)
        gxhat_sum = g * xhat
        ggamma = gxhat_sum.sum(axis=(0,) + axes)
        gx = None
        if x.requires_grad:
            mg = g.mean(axis=axes, keepdims=True)
            mgx = gxhat_sum.mean(axis=axes, keepdims=True)
            gx = (gmm * inv_std) * (g - mg - xhat * mgx)
        return gx, ggamma, gbeta

    return _result(out, (x, gamma, beta), _bw)


def _upsample_axis(a: np.ndarray, axis: int) -> np.ndarray:
    # align_corners=False, factor 2: out[2i] = .75 a[i] + .25 a[i-1], out[2i+1] = .75 a[i] + .25 a[i+1]
    n = a.shape[axis]
    prev = np.take(a, np.r_[0, np.arange(n - 1)], axis=axis)
    nxt = np.take(a, np.r_[np.arange(1, n), n - 1], axis=axis)
    even = 0.75 * a + 0.25 * prev
    odd = 0.75 * a + 0.25 * nxt
    out = np.stack([even, odd], axis=axis + 1)
    shape = list(a.shape)
    shape[axis] = 2 * n
    return out.reshape(shape)


def _upsample_axis_T(g: np.ndarray, axis: int) -> np.ndarray:
    shape = list(g.shape)
    n = shape[axis] // 2
    shape[axis : axis + 1] = [n, 2]
    g2 = g.reshape(shape)
    even = np.take(g2, 0, axis=axis + 1)
    odd = np.take(g2, 1, axis=axis + 1)
    out = 0.75 * (even + odd)
    sl = [slice(None)] * out.ndim

    def _at(s):
        sl2 = list(sl)
        sl2[axis] = s
        return tuple(sl2)

    # even[i] pulls .25 from a[i-1] (clamped to 0), odd[i] pulls .25 from a[i+1] (clamped to n-1)
    out[_at(slice(0, n - 1))] += 0.25 * even[_at(slice(1, n))]
    out[_at(slice(0, 1))] += 0.25 * even[_at(slice(0, 1))]
    out[_at(slice(1, n))] += 0.25 * odd[_at(slice(0, n - 1))]
    out[_at(slice(n - 1, n))] += 0.25 * odd[_at(slice(n - 1, n))]
    return out


def trilinear_upsample(x: Tensor, factor: int = 2) -> Tensor:
    """Trilinear upsampling by 2 along D, H, W with half-pixel (align_corners=False) sampling."""
    if factor != 2:
        raise ValueError("only factor 2 is supported; chain calls for larger factors")
    if x.ndim != 5:
        raise ShapeError(f"trilinear_upsample needs a 5D tensor, got {x.shape}", "ndim")
    out = x.data
    for axis in (2, 3, 4):
        out = _upsample_axis(out, axis)

    def _bw(g):
        for axis in (4, 3, 2):
            g = _upsample_axis_T(g, axis)
        return (g,)

    return _result(out.astype(x.dtype, copy=False), (x,), _bw)


def channel_concat(x: Tensor, y: Tensor) -> Tensor:
    if x.ndim != y.ndim or x.shape[:1] != y.shape[:1] or x.shape[2:] != y.shape[2:]:
        raise ShapeError(f"channel_concat: incompatible shapes {x.shape} and {y.shape}", "spatial")
    cx = x.shape[1]
    out = np.concatenate([x.data, y.data], axis=1)
    return _result(out, (x, y), lambda g: (g[:, :cx], g[:, cx:]))


# -- losses -------------------------------------------------------------------


def bce_with_logits(logits: Tensor, target: np.ndarray) -> Tensor:
    """Voxel-mean binary cross entropy evaluated from logits without overflow."""
    t = np.asarray(target, dtype=logits.dtype)
    if t.shape != logits.shape:
        raise ShapeError(f"bce_with_logits: target {t.shape} vs logits {logits.shape}")
    z = logits.data
    n = z.size
    val = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    out = np.asarray(val.mean(), dtype=logits.dtype)

    def _bw(g):
        return ((_sigmoid(z) - t) * (g / n),)

    return _result(out, (logits,), _bw)


def soft_dice_loss(logits: Tensor, target: np.ndarray, smooth: float = 1e-5) -> Tensor:
    """``1 - (2 sum(p g) + s) / (sum(p) + sum(g) + s)`` with ``p = sigmoid(logits)``.

    Computed per sample (axis 0) and averaged over the batch.
    """
    t = np.asarray(target, dtype=logits.dtype)
    if t.shape != logits.shape:
        raise ShapeError(f"soft_dice_loss: target {t.shape} vs logits {logits.shape}")
    p = _sigmoid(logits.data)
    axes = tuple(range(1, p.ndim))
    inter = (p * t).sum(axis=axes)
    denom = p.sum(axis=axes) + t.sum(axis=axes) + smooth
    per_sample = 1.0 - (2.0 * inter + smooth) / denom
    nb = p.shape[0]
    out = np.asarray(per_sample.mean(), dtype=logits.dtype)

    def _bw(g):
        bshape = (nb,) + (1,) * (p.ndim - 1)
        num = (2.0 * inter + smooth).reshape(bshape)
        den = denom.reshape(bshape)
        dldp = -(2.0 * t * den - num) / (den * den)
        return (dldp * p * (1.0 - p) * (g / nb),)

    return _result(out, (logits,), _bw)
