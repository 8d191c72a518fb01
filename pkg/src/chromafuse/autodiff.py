"""Dense-tensor arithmetic with reverse-mode differentiation.

Everything is backed by numpy arrays in double precision. Operations on
:class:`Tensor` record their inputs and a vector-Jacobian closure, so a
scalar loss can be pulled back through the whole computation with
:func:`backward`. The recorded graph plays the role of a gradient tape:
walking it once in reverse topological order delivers the gradient of
every reachable input exactly once.

The operation set is deliberately small: elementwise arithmetic, a few
nonlinearities, reductions, 2-D cross-correlation and bilinear
resampling. That is enough to express the denoiser, the fusion head and
all training losses. No accelerator path, no graph compilation.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

Array = np.ndarray

_DTYPE = np.float64

_grad_state = threading.local()


def _recording_enabled() -> bool:
    return getattr(_grad_state, "enabled", True)


@contextmanager
def no_grad():
    """Suppress graph recording (per thread) for pure inference."""
    previous = _recording_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = previous


def _as_array(value) -> Array:
    arr = np.asarray(value, dtype=_DTYPE)
    return arr


class Tensor:
    """A numpy array plus the bookkeeping needed for reverse-mode AD.

    ``requires_grad`` marks trainable leaves. Non-leaf tensors keep
    references to their parents and one VJP closure per parent; tensors
    whose inputs are all constant record nothing, which keeps inference
    graphs empty.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_vjps")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = _as_array(data)
        if not np.all(np.isfinite(self.data)):
            raise ValueError("tensor values must be finite")
        self.grad: Array | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._vjps: tuple[Callable[[Array], Array], ...] = ()

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag}, requires_grad={self.requires_grad})"

    # -- operator sugar -------------------------------------------------
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

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)


def _wrap(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _make(data: Array, parents: Sequence[Tensor], vjps: Sequence[Callable[[Array], Array]]) -> Tensor:
    out = Tensor(data)
    if not _recording_enabled():
        return out
    recorded = [(p, v) for p, v in zip(parents, vjps) if _needs_grad(p)]
    if recorded:
        out.requires_grad = True
        out._parents = tuple(p for p, _ in recorded)
        out._vjps = tuple(v for _, v in recorded)
    return out


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad or bool(t._parents)


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum a gradient down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


# -- elementwise arithmetic ---------------------------------------------

def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data + b.data
    return _make(out, (a, b), (lambda g: _unbroadcast(g, a.shape), lambda g: _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data - b.data
    return _make(out, (a, b), (lambda g: _unbroadcast(g, a.shape), lambda g: _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data * b.data
    return _make(
        out,
        (a, b),
        (lambda g: _unbroadcast(g * b.data, a.shape), lambda g: _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data / b.data
    return _make(
        out,
        (a, b),
        (
            lambda g: _unbroadcast(g / b.data, a.shape),
            lambda g: _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
    )


def power(a, exponent: float) -> Tensor:
    a = _wrap(a)
    p = float(exponent)
    out = a.data ** p
    return _make(out, (a,), (lambda g: g * p * a.data ** (p - 1.0),))


def sqrt(a) -> Tensor:
    a = _wrap(a)
    root = np.sqrt(a.data)
    return _make(root, (a,), (lambda g: g * 0.5 / root,))


def absolute(a) -> Tensor:
    a = _wrap(a)
    out = np.abs(a.data)
    sign = np.sign(a.data)
    return _make(out, (a,), (lambda g: g * sign,))


def maximum(a, b) -> Tensor:
    """Elementwise max; ties route the gradient to the first argument."""
    a, b = _wrap(a), _wrap(b)
    take_a = a.data >= b.data
    out = np.where(take_a, a.data, b.data)
    return _make(
        out,
        (a, b),
        (
            lambda g: _unbroadcast(g * take_a, a.shape),
            lambda g: _unbroadcast(g * ~take_a, b.shape),
        ),
    )


def tanh(a) -> Tensor:
    a = _wrap(a)
    out = np.tanh(a.data)
    return _make(out, (a,), (lambda g: g * (1.0 - out * out),))


def leaky_relu(a, negative_slope: float = 0.2) -> Tensor:
    a = _wrap(a)
    scale = np.where(a.data > 0, 1.0, negative_slope)
    return _make(a.data * scale, (a,), (lambda g: g * scale,))


# -- reductions and shape ops --------------------------------------------

def tensor_sum(a) -> Tensor:
    a = _wrap(a)
    out = np.asarray(a.data.sum())
    return _make(out, (a,), (lambda g: np.broadcast_to(g, a.shape).copy(),))


def mean(a) -> Tensor:
    a = _wrap(a)
    n = a.size
    out = np.asarray(a.data.mean())
    return _make(out, (a,), (lambda g: np.broadcast_to(g / n, a.shape).copy(),))


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    a = _wrap(a)
    return _make(a.data.reshape(shape), (a,), (lambda g: g.reshape(a.shape),))


def concat(tensors: Iterable[Tensor], axis: int = -1) -> Tensor:
    parts = [_wrap(t) for t in tensors]
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(i: int):
        lo, hi = offsets[i], offsets[i + 1]

        def vjp(g: Array) -> Array:
            index = [slice(None)] * g.ndim
            index[axis] = slice(lo, hi)
            return g[tuple(index)]

        return vjp

    return _make(out, parts, [make_vjp(i) for i in range(len(parts))])


def pad_edge2d(a, pad: int = 1) -> Tensor:
    """Replicate-pad the two leading (spatial) axes of an HWC tensor."""
    a = _wrap(a)
    if a.data.ndim != 3:
        raise ValueError("pad_edge2d expects an HWC tensor")
    if pad < 0:
        raise ValueError("pad must be >= 0")
    h, w, _ = a.shape
    ys = np.clip(np.arange(h + 2 * pad) - pad, 0, h - 1)
    xs = np.clip(np.arange(w + 2 * pad) - pad, 0, w - 1)
    out = a.data[np.ix_(ys, xs)]

    def vjp(g: Array) -> Array:
        dx = np.zeros(a.shape)
        yy = np.broadcast_to(ys[:, None], g.shape[:2])
        xx = np.broadcast_to(xs[None, :], g.shape[:2])
        np.add.at(dx, (yy, xx), g)
        return dx

    return _make(out, (a,), (vjp,))


def take_channel(a, index: int) -> Tensor:
    """Select one channel plane from an HWC tensor."""
    a = _wrap(a)
    if a.data.ndim != 3:
        raise ValueError("take_channel expects an HWC tensor")
    data = a.data[:, :, index]

    def vjp(g: Array) -> Array:
        full = np.zeros(a.shape)
        full[:, :, index] = g
        return full

    return _make(data, (a,), (vjp,))


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError("matmul expects 2-D operands")
    out = a.data @ b.data
    return _make(out, (a, b), (lambda g: g @ b.data.T, lambda g: a.data.T @ g))


# -- image operations -----------------------------------------------------

def conv2d(x, kernel, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of an HWC image with a (kh, kw, Cin, Cout) kernel.

    Zero padding; output spatial size floor((H + 2p - kh)/stride) + 1.
    """
    x, kernel = _wrap(x), _wrap(kernel)
    if x.data.ndim != 3:
        raise ValueError(f"conv2d input must be HWC, got shape {x.shape}")
    if kernel.data.ndim != 4:
        raise ValueError(f"conv2d kernel must be (kh, kw, Cin, Cout), got shape {kernel.shape}")
    if stride < 1 or padding < 0:
        raise ValueError("conv2d needs stride >= 1 and padding >= 0")
    h, w, c_in = x.shape
    kh, kw, kc_in, c_out = kernel.shape
    if kc_in != c_in:
        raise ValueError(f"kernel expects {kc_in} input channels, image has {c_in}")
    out_h = (h + 2 * padding - kh) // stride + 1
    out_w = (w + 2 * padding - kw) // stride + 1
    if out_h < 1 or out_w < 1:
        raise ValueError("kernel larger than padded input")

    padded = np.pad(x.data, ((padding, padding), (padding, padding), (0, 0)))
    cols = np.empty((out_h, out_w, kh, kw, c_in), dtype=_DTYPE)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j, :] = padded[i : i + out_h * stride : stride, j : j + out_w * stride : stride, :]
    patches = cols.reshape(out_h * out_w, kh * kw * c_in)
    weights = kernel.data.reshape(kh * kw * c_in, c_out)
    out = (patches @ weights).reshape(out_h, out_w, c_out)

    def vjp_x(g: Array) -> Array:
        d_cols = (g.reshape(-1, c_out) @ weights.T).reshape(out_h, out_w, kh, kw, c_in)
        d_padded = np.zeros_like(padded)
        for i in range(kh):
            for j in range(kw):
                d_padded[i : i + out_h * stride : stride, j : j + out_w * stride : stride, :] += d_cols[:, :, i, j, :]
        if padding:
            return d_padded[padding : padding + h, padding : padding + w, :]
        return d_padded

    def vjp_k(g: Array) -> Array:
        return (patches.T @ g.reshape(-1, c_out)).reshape(kh, kw, c_in, c_out)

    return _make(out, (x, kernel), (vjp_x, vjp_k))


def _bilinear_axis(n_in: int, n_out: int) -> tuple[Array, Array, Array]:
    """Corner-aligned source indices and weights for one axis."""
    if n_out == 1 or n_in == 1:
        pos = np.zeros(n_out)
    else:
        pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    lo = np.floor(pos).astype(np.int64)
    lo = np.minimum(lo, n_in - 1)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    return lo, hi, frac


def resample_bilinear(x, out_h: int, out_w: int) -> Tensor:
    """Bilinear resampling of an HWC image, corner-aligned.

    Same-size resampling is an exact identity; constant images stay
    constant because the four corner weights always sum to one.
    """
    x = _wrap(x)
    if x.data.ndim != 3:
        raise ValueError(f"resample_bilinear input must be HWC, got shape {x.shape}")
    if out_h < 1 or out_w < 1:
        raise ValueError("output size must be positive")
    h, w, c = x.shape
    y0, y1, fy = _bilinear_axis(h, out_h)
    x0, x1, fx = _bilinear_axis(w, out_w)
    wy = fy[:, None, None]
    wx = fx[None, :, None]
    w00 = (1 - wy) * (1 - wx)
    w01 = (1 - wy) * wx
    w10 = wy * (1 - wx)
    w11 = wy * wx
    data = x.data
    out = (
        w00 * data[np.ix_(y0, x0)]
        + w01 * data[np.ix_(y0, x1)]
        + w10 * data[np.ix_(y1, x0)]
        + w11 * data[np.ix_(y1, x1)]
    )

    def vjp(g: Array) -> Array:
        dx = np.zeros_like(data)
        yy0 = np.broadcast_to(y0[:, None], (out_h, out_w))
        yy1 = np.broadcast_to(y1[:, None], (out_h, out_w))
        xx0 = np.broadcast_to(x0[None, :], (out_h, out_w))
        xx1 = np.broadcast_to(x1[None, :], (out_h, out_w))
        np.add.at(dx, (yy0, xx0), g * w00)
        np.add.at(dx, (yy0, xx1), g * w01)
        np.add.at(dx, (yy1, xx0), g * w10)
        np.add.at(dx, (yy1, xx1), g * w11)
        return dx

    return _make(out, (x,), (vjp,))


# -- reverse pass ----------------------------------------------------------

def backward(loss: Tensor, wrt: Iterable[Tensor] | None = None) -> dict[int, Array]:
    """Pull the gradient of a scalar loss back through the recorded graph.

    Returns a mapping from ``id(tensor)`` to gradient array for every
    tensor with ``requires_grad``; the same arrays are stored on
    ``tensor.grad``. Each recorded node is visited exactly once, in
    reverse topological order.
    """
    if loss.data.size != 1:
        raise ValueError("backward requires a scalar loss")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))

    grads: dict[int, Array] = {id(loss): np.ones_like(loss.data)}
    results: dict[int, Array] = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad and not node._parents:
            node.grad = g if node.grad is None else node.grad + g
            results[id(node)] = node.grad
        for parent, vjp in zip(node._parents, node._vjps):
            contribution = vjp(g)
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + contribution
            else:
                grads[key] = contribution

    if wrt is not None:
        return {id(t): results.get(id(t), np.zeros_like(t.data)) for t in wrt}
    return results


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
