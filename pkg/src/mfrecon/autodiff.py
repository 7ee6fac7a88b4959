"""Reverse-mode automatic differentiation over a dynamically recorded tape.

Tensors wrap numpy float buffers (float32 by default, float64 supported for
numerical verification). Every differentiable operation records a backward
closure; calling ``backward()`` on a scalar walks the tape in reverse
topological order and accumulates gradients into ``Tensor.grad``.

Tapes are thread-confined: a graph built on one thread must be backpropagated
on the same thread. Reading parameter tensors from many threads is safe.
"""

from __future__ import annotations

import contextlib
from typing import Iterable, Sequence

import numpy as np

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference mode)."""
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
    """N-dimensional array with an optional gradient buffer.

    ``data`` is always a numpy array of the tensor's dtype; ``grad`` is either
    None or an array of the same shape. Tensors created from operations hold
    references to their parents plus a closure that maps the output gradient
    to parent gradients.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad) and _grad_enabled
        self.grad = None
        self._parents: tuple = ()
        self._backward = None
        self._op = ""

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def as_tensor(x, like: "Tensor | None" = None) -> "Tensor":
        if isinstance(x, Tensor):
            return x
        dtype = like.data.dtype if like is not None else np.float32
        return Tensor(np.asarray(x, dtype=dtype))

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
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

    def zero_grad(self):
        self.grad = None

    def astype(self, dtype) -> "Tensor":
        t = Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)
        t.requires_grad = self.requires_grad
        return t

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

    # -- tape -----------------------------------------------------------------

    def backward(self, grad=None):
        """Backpropagate from this tensor; defaults to d(self)/d(self)=1 for scalars."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without an explicit gradient needs a scalar tensor")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.data.dtype)

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
                if id(p) not in seen and (p.requires_grad or p._parents):
                    stack.append((p, False))

        self.grad = grad if self.grad is None else self.grad + grad
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            for parent, pgrad in zip(node._parents, node._backward(node.grad)):
                if pgrad is None:
                    continue
                if not (parent.requires_grad or parent._parents):
                    continue
                pgrad = np.asarray(pgrad, dtype=parent.data.dtype)
                parent.grad = pgrad if parent.grad is None else parent.grad + pgrad

    # -- operator sugar ---------------------------------------------------------

    def __add__(self, other):
        return add(self, Tensor.as_tensor(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, Tensor.as_tensor(other, self))

    def __rsub__(self, other):
        return sub(Tensor.as_tensor(other, self), self)

    def __mul__(self, other):
        return mul(self, Tensor.as_tensor(other, self))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, Tensor.as_tensor(other, self))

    def __rtruediv__(self, other):
        return div(Tensor.as_tensor(other, self), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, Tensor.as_tensor(other, self))

    def __pow__(self, p):
        return pow_scalar(self, p)

    def __getitem__(self, idx):
        return take(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def _make(data, parents, backward, op, requires_grad=None) -> Tensor:
    out = Tensor(data)
    if _grad_enabled:
        need = any(p.requires_grad or p._parents for p in parents) if requires_grad is None else requires_grad
        if need:
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
            out._op = op
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a gradient over broadcast dimensions back to ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise arithmetic ---------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)), "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    return _make(a.data / b.data, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * a.data / (b.data * b.data), b.shape)), "div")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def pow_scalar(a: Tensor, p: float) -> Tensor:
    out = a.data ** p
    return _make(out, (a,), lambda g: (g * p * a.data ** (p - 1),), "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def sin(a: Tensor) -> Tensor:
    return _make(np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),), "sin")


def cos(a: Tensor) -> Tensor:
    return _make(np.cos(a.data), (a,), lambda g: (g * -np.sin(a.data),), "cos")


def abs_(a: Tensor) -> Tensor:
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def leaky_relu(a: Tensor, slope: float = 0.01) -> Tensor:
    factor = np.where(a.data > 0, 1.0, slope).astype(a.data.dtype)
    return _make(a.data * factor, (a,), lambda g: (g * factor,), "leaky_relu")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ez = np.exp(x[~pos])
    out[~pos] = ez / (1.0 + ez)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax; the normalizer accumulates in float64."""
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    denom = e.sum(axis=axis, keepdims=True, dtype=np.float64)
    out = (e / denom).astype(a.data.dtype)

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _make(out, (a,), backward, "softmax")


# -- reductions ---------------------------------------------------------------

def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out64 = a.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64)
    out = np.asarray(out64, dtype=a.data.dtype)

    def backward(g):
        g = np.asarray(g)
        if axis is None:
            return (np.broadcast_to(g, a.shape).astype(a.data.dtype),)
        axes = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            for ax in sorted(ax % a.ndim for ax in axes):
                g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, a.shape).astype(a.data.dtype),)

    return _make(out, (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return sum_(a, axis=axis, keepdims=keepdims) * (1.0 / n)


# -- shape manipulation ---------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [t if isinstance(t, Tensor) else Tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        slicer = [slice(None)] * g.ndim
        grads = []
        for i in range(len(tensors)):
            slicer[axis] = slice(offsets[i], offsets[i + 1])
            grads.append(g[tuple(slicer)])
        return tuple(grads)

    return _make(out, tuple(tensors), backward, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [t if isinstance(t, Tensor) else Tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _make(out, tuple(tensors), backward, "stack")


def take(a: Tensor, idx) -> Tensor:
    """Basic and integer-array indexing with gradient scatter-add."""
    out = a.data[idx]

    def backward(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return (ga,)

    return _make(out, (a,), backward, "take")


# -- contractions ---------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data @ b.data

    def backward(g):
        if b.ndim == 1:
            bd = b.data[:, None]
            gm = g[..., None] if a.ndim > 1 else g[None, None]
            ga = _unbroadcast(gm @ bd.T, a.shape) if a.ndim > 1 else (g * b.data)
            gb = _unbroadcast((a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1)), b.shape)
            return ga, gb
        if a.ndim == 1:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
            gb = _unbroadcast(a.data[:, None] @ g[None, :] if b.ndim == 2
                              else a.data[:, None] * g[..., None, :], b.shape)
            return ga, gb
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _make(out, (a, b), backward, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map ``x @ weight.T + bias`` with weight laid out (out, in)."""
    if x.shape[-1] != weight.shape[-1]:
        raise ValueError(f"linear: input width {x.shape[-1]} != weight width {weight.shape[-1]}")
    out = matmul(x, transpose(weight))
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ValueError("linear: bias shape mismatch")
        out = add(out, bias)
    return out


# -- convolution ----------------------------------------------------------------

def _conv_out_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of (B, Cin, H, W) with kernels (Cout, Cin, kh, kw)."""
    B, Cin, H, W = x.shape
    Cout, Cin2, kh, kw = weight.shape
    if Cin != Cin2:
        raise ValueError(f"conv2d: input channels {Cin} != kernel channels {Cin2}")
    Ho = _conv_out_size(H, kh, stride, padding)
    Wo = _conv_out_size(W, kw, stride, padding)
    if Ho <= 0 or Wo <= 0:
        raise ValueError("conv2d: spatial dims incompatible with kernel/stride/padding")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((B, Cin, kh, kw, Ho, Wo), dtype=x.data.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + Ho * stride:stride, j:j + Wo * stride:stride]
    cols2 = cols.transpose(0, 4, 5, 1, 2, 3).reshape(B * Ho * Wo, Cin * kh * kw)
    w2 = weight.data.reshape(Cout, -1)
    y = (cols2 @ w2.T).reshape(B, Ho, Wo, Cout).transpose(0, 3, 1, 2)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, Cout)
        gw = (g2.T @ cols2).reshape(weight.shape)
        gcols2 = g2 @ w2
        gcols = gcols2.reshape(B, Ho, Wo, Cin, kh, kw).transpose(0, 3, 4, 5, 1, 2)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + Ho * stride:stride, j:j + Wo * stride:stride] += gcols[:, :, i, j]
        gx = gxp[:, :, padding:padding + H, padding:padding + W]
        return gx, gw

    out = _make(y, (x, weight), backward, "conv2d")
    if bias is not None:
        out = add(out, reshape(bias, (1, Cout, 1, 1)))
    return out


def conv3d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of (B, Cin, D, H, W) with kernels (Cout, Cin, kd, kh, kw)."""
    B, Cin, D, H, W = x.shape
    Cout, Cin2, kd, kh, kw = weight.shape
    if Cin != Cin2:
        raise ValueError(f"conv3d: input channels {Cin} != kernel channels {Cin2}")
    Do = _conv_out_size(D, kd, stride, padding)
    Ho = _conv_out_size(H, kh, stride, padding)
    Wo = _conv_out_size(W, kw, stride, padding)
    if Do <= 0 or Ho <= 0 or Wo <= 0:
        raise ValueError("conv3d: spatial dims incompatible with kernel/stride/padding")

    p = padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p), (p, p)))
    cols = np.empty((B, Cin, kd, kh, kw, Do, Ho, Wo), dtype=x.data.dtype)
    for d in range(kd):
        for i in range(kh):
            for j in range(kw):
                cols[:, :, d, i, j] = xp[:, :,
                                         d:d + Do * stride:stride,
                                         i:i + Ho * stride:stride,
                                         j:j + Wo * stride:stride]
    cols2 = cols.transpose(0, 5, 6, 7, 1, 2, 3, 4).reshape(B * Do * Ho * Wo, Cin * kd * kh * kw)
    w2 = weight.data.reshape(Cout, -1)
    y = (cols2 @ w2.T).reshape(B, Do, Ho, Wo, Cout).transpose(0, 4, 1, 2, 3)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 4, 1).reshape(B * Do * Ho * Wo, Cout)
        gw = (g2.T @ cols2).reshape(weight.shape)
        gcols = (g2 @ w2).reshape(B, Do, Ho, Wo, Cin, kd, kh, kw).transpose(0, 4, 5, 6, 7, 1, 2, 3)
        gxp = np.zeros_like(xp)
        for d in range(kd):
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :,
                        d:d + Do * stride:stride,
                        i:i + Ho * stride:stride,
                        j:j + Wo * stride:stride] += gcols[:, :, d, i, j]
        gx = gxp[:, :, p:p + D, p:p + H, p:p + W]
        return gx, gw

    out = _make(y, (x, weight), backward, "conv3d")
    if bias is not None:
        out = add(out, reshape(bias, (1, Cout, 1, 1, 1)))
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    mu = mean(x, axis=-1, keepdims=True)
    centered = sub(x, mu)
    var = mean(mul(centered, centered), axis=-1, keepdims=True)
    inv = pow_scalar(add(var, Tensor.as_tensor(eps, x)), -0.5)
    return add(mul(mul(centered, inv), gain), bias)
