"""
Tensor Core - Reverse-Mode Automatic Differentiation

A small define-by-run autodiff engine over numpy float64 arrays. It supplies
every layer primitive the interpretable feature extractor needs:

1. Tensor + Tape (operations record onto the active tape of this thread)
2. Elementwise / reduction / shape ops with broadcasting
3. Layer primitives: conv2d, linear, relu, tanh, max pooling, adaptive max
   pooling, residual add, softmax, log-softmax, zero padding
4. Losses: Huber, mean squared error
5. Optimisation: Adam (with AMSGrad), global-norm gradient clipping
6. gradcheck: central finite differences against autograd

Usage:
    with Tape() as tape:
        loss = huber_loss(model(x), target)
    tape.backward(loss)

Ops called outside a ``Tape`` context run in inference mode: nothing is
recorded and no gradients can be computed. A tape and its tensors belong to
one thread; parameters may be read concurrently but must not be stepped
concurrently.
"""

from __future__ import annotations

import itertools
import logging
import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from models import NumericalError, ShapeError

logger = logging.getLogger(__name__)

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence[float]]

# ============================================================================
# Tape
# ============================================================================

_local = threading.local()
_tape_ids = itertools.count(1)


def _tape_stack() -> List["Tape"]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> Optional["Tape"]:
    """The innermost tape opened on this thread, or None (inference mode)."""
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """
    Ordered record of the operations executed while the tape is active.

    Every node is appended after its parents, so reverse insertion order is a
    valid reverse topological order and ``backward`` visits each node once.
    """

    def __init__(self):
        self.id = next(_tape_ids)
        self.nodes: List[Tensor] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, node: "Tensor") -> None:
        node.tape_id = self.id
        node._tape = self
        node._index = len(self.nodes)
        self.nodes.append(node)

    def backward(self, loss: "Tensor") -> None:
        """
        Populate ``grad`` of every trainable leaf reachable from ``loss``.

        Leaf gradients accumulate across calls until zeroed; intermediate
        node gradients are recomputed from scratch on each call.
        """
        if loss.data.size != 1:
            raise NumericalError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise NumericalError("loss was not recorded on this tape")

        upto = self.nodes[: loss._index + 1]
        for node in upto:
            node.grad = None
        loss.grad = np.ones_like(loss.data)
        for node in reversed(upto):
            if node.grad is not None and node._backward is not None:
                node._backward(node.grad)


def backward(loss: "Tensor") -> None:
    """Backpropagate from a scalar loss through the tape it was recorded on."""
    if loss._tape is None:
        raise NumericalError("loss is not on an active tape (was it computed inside `with Tape()`?)")
    loss._tape.backward(loss)


# ============================================================================
# Tensor
# ============================================================================


class Tensor:
    """
    n-dimensional float64 array with an optional gradient.

    ``requires_grad`` marks trainable leaves and every node computed from them
    while a tape is active.
    """

    __slots__ = (
        "data",
        "grad",
        "requires_grad",
        "tape_id",
        "name",
        "_tape",
        "_index",
        "_backward",
        "_op",
    )

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.array(data, dtype=np.float64, order="C")
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.tape_id: Optional[int] = None
        self.name = name
        self._tape: Optional[Tape] = None
        self._index = -1
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self._op = "leaf"

    @classmethod
    def _node(cls, data: np.ndarray, parents: Sequence["Tensor"], op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        out.tape_id = None
        out._tape = None
        out._index = -1
        out._backward = None
        out._op = op
        tape = active_tape()
        out.requires_grad = tape is not None and any(p.requires_grad for p in parents)
        if out.requires_grad:
            tape.record(out)
        return out

    # -- introspection -------------------------------------------------------

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item", "size", 1, self.data.size)
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self._op}{label})"

    # -- operators -------------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other: float):
        return scale(self, 1.0 / float(other))

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        return transpose(self, axes)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis, keepdims)


def as_tensor(value: ArrayLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _accumulate(tensor: Tensor, grad: np.ndarray) -> None:
    if not tensor.requires_grad:
        return
    if tensor.grad is None:
        tensor.grad = np.array(grad, dtype=np.float64, copy=True)
    else:
        tensor.grad += grad


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ============================================================================
# Elementwise and shape ops
# ============================================================================


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor._node(a.data + b.data, (a, b), "add")

    def _backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    out._backward = _backward
    return out


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor._node(a.data - b.data, (a, b), "sub")

    def _backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    out._backward = _backward
    return out


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor._node(a.data * b.data, (a, b), "mul")

    def _backward(g):
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))

    out._backward = _backward
    return out


def scale(a: ArrayLike, factor: float) -> Tensor:
    a = as_tensor(a)
    out = Tensor._node(a.data * factor, (a,), "scale")
    out._backward = lambda g: _accumulate(a, g * factor)
    return out


def square(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out = Tensor._node(a.data * a.data, (a,), "square")
    out._backward = lambda g: _accumulate(a, 2.0 * a.data * g)
    return out


def exp(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    value = np.exp(a.data)
    out = Tensor._node(value, (a,), "exp")
    out._backward = lambda g: _accumulate(a, g * value)
    return out


def log(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out = Tensor._node(np.log(a.data), (a,), "log")
    out._backward = lambda g: _accumulate(a, g / a.data)
    return out


def relu(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    positive = a.data > 0.0
    out = Tensor._node(np.where(positive, a.data, 0.0), (a,), "relu")
    out._backward = lambda g: _accumulate(a, g * positive)
    return out


def tanh(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    value = np.tanh(a.data)
    out = Tensor._node(value, (a,), "tanh")
    out._backward = lambda g: _accumulate(a, g * (1.0 - value * value))
    return out


def residual_add(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Skip connection: elementwise sum of two tensors of identical shape."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError("residual_add", "shape", a.shape, b.shape)
    return add(a, b)


def tsum(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = Tensor._node(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), "sum")

    def _backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape))

    out._backward = _backward
    return out


def mean(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(tsum(a, axis, keepdims), 1.0 / float(count))


def reshape(a: ArrayLike, shape: Tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    try:
        value = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError("reshape", "size", a.size, shape) from exc
    out = Tensor._node(value, (a,), "reshape")
    out._backward = lambda g: _accumulate(a, g.reshape(a.shape))
    return out


def transpose(a: ArrayLike, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = Tensor._node(a.data.transpose(axes), (a,), "transpose")
    out._backward = lambda g: _accumulate(a, g.transpose(inverse))
    return out


def select(a: ArrayLike, indices: Sequence[int]) -> Tensor:
    """Pick ``a[i, indices[i]]`` for each row of a 2-D tensor."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    if a.ndim != 2 or idx.shape != (a.shape[0],):
        raise ShapeError("select", "rows", a.shape[:1], idx.shape)
    rows = np.arange(a.shape[0])
    out = Tensor._node(a.data[rows, idx], (a,), "select")

    def _backward(g):
        grad = np.zeros_like(a.data)
        np.add.at(grad, (rows, idx), g)
        _accumulate(a, grad)

    out._backward = _backward
    return out


# ============================================================================
# Layer primitives
# ============================================================================


def linear(x: ArrayLike, weight: ArrayLike, bias: ArrayLike) -> Tensor:
    """
    Fully connected layer over the last axis: ``out = x @ weight.T + bias``.

    Args:
        x: (..., N) input
        weight: (M, N) weight matrix
        bias: (M,) bias

    Returns:
        (..., M) tensor
    """
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if weight.ndim != 2:
        raise ShapeError("linear", "weight rank", 2, weight.ndim)
    m, n = weight.shape
    if x.shape[-1:] != (n,):
        raise ShapeError("linear", "N (input features)", n, x.shape[-1] if x.ndim else None)
    if bias.shape != (m,):
        raise ShapeError("linear", "M (bias)", m, bias.shape)

    out = Tensor._node(x.data @ weight.data.T + bias.data, (x, weight, bias), "linear")

    def _backward(g):
        if weight.requires_grad:
            _accumulate(weight, g.reshape(-1, m).T @ x.data.reshape(-1, n))
        if bias.requires_grad:
            _accumulate(bias, g.reshape(-1, m).sum(axis=0))
        if x.requires_grad:
            _accumulate(x, g @ weight.data)

    out._backward = _backward
    return out


def _batched(x: Tensor, op: str) -> Tuple[np.ndarray, bool]:
    if x.ndim == 4:
        return x.data, True
    if x.ndim == 3:
        return x.data[None], False
    raise ShapeError(op, "input rank", "3 (C,H,W) or 4 (N,C,H,W)", x.ndim)


def conv2d(x: ArrayLike, weight: ArrayLike, bias: ArrayLike, stride: int = 1) -> Tensor:
    """
    Valid (unpadded) 2-D convolution.

    Each output element is the dot product of the kernel with the window
    starting at (row * stride, col * stride), plus the channel bias.

    Args:
        x: (C_in, H, W) or (N, C_in, H, W)
        weight: (C_out, C_in, K, K)
        bias: (C_out,)
        stride: positive step between windows

    Returns:
        (C_out, H', W') or (N, C_out, H', W') with H' = (H - K) // stride + 1
    """
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    xd, batched = _batched(x, "conv2d")
    if weight.ndim != 4:
        raise ShapeError("conv2d", "weight rank", 4, weight.ndim)
    c_out, c_in, kernel, kernel_w = weight.shape
    if kernel != kernel_w:
        raise ShapeError("conv2d", "kernel width", kernel, kernel_w)
    if xd.shape[1] != c_in:
        raise ShapeError("conv2d", "C_in", c_in, xd.shape[1])
    if bias.shape != (c_out,):
        raise ShapeError("conv2d", "C_out (bias)", c_out, bias.shape)
    if stride < 1:
        raise ShapeError("conv2d", "stride", ">= 1", stride)
    height, width = xd.shape[2:]
    if kernel > height:
        raise ShapeError("conv2d", "H", f">= kernel {kernel}", height)
    if kernel > width:
        raise ShapeError("conv2d", "W", f">= kernel {kernel}", width)

    out_h = (height - kernel) // stride + 1
    out_w = (width - kernel) // stride + 1
    windows = sliding_window_view(xd, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride]
    value = np.einsum("nchwij,ocij->nohw", windows, weight.data, optimize=True)
    value += bias.data[None, :, None, None]
    out = Tensor._node(value if batched else value[0], (x, weight, bias), "conv2d")

    def _backward(g):
        g4 = g if batched else g[None]
        if weight.requires_grad:
            _accumulate(weight, np.einsum("nohw,nchwij->ocij", g4, windows, optimize=True))
        if bias.requires_grad:
            _accumulate(bias, g4.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dwin = np.einsum("nohw,ocij->nchwij", g4, weight.data, optimize=True)
            dx = np.zeros_like(xd)
            for i in range(kernel):
                for j in range(kernel):
                    dx[:, :, i : i + stride * out_h : stride, j : j + stride * out_w : stride] += dwin[..., i, j]
            _accumulate(x, dx if batched else dx[0])

    out._backward = _backward
    return out


def pad2d(x: ArrayLike, pad: int) -> Tensor:
    """Zero-pad the two trailing spatial axes by ``pad`` pixels on each side."""
    x = as_tensor(x)
    if pad == 0:
        return x
    widths = [(0, 0)] * (x.ndim - 2) + [(pad, pad), (pad, pad)]
    out = Tensor._node(np.pad(x.data, widths), (x,), "pad2d")
    out._backward = lambda g: _accumulate(x, g[..., pad:-pad, pad:-pad])
    return out


def maxpool2d(x: ArrayLike, kernel: int, stride: int) -> Tensor:
    """
    Max pooling over kernel x kernel windows.

    The gradient goes to the arg-max of each window; ties resolve to the lowest
    flat index so replays of a run are deterministic.
    """
    x = as_tensor(x)
    xd, batched = _batched(x, "maxpool2d")
    n, c, height, width = xd.shape
    if kernel > height or kernel > width:
        raise ShapeError("maxpool2d", "H/W", f">= kernel {kernel}", (height, width))
    out_h = (height - kernel) // stride + 1
    out_w = (width - kernel) // stride + 1
    windows = sliding_window_view(xd, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride]
    flat = windows.reshape(n, c, out_h, out_w, kernel * kernel)
    arg = flat.argmax(axis=-1)
    value = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    out = Tensor._node(value if batched else value[0], (x,), "maxpool2d")

    def _backward(g):
        g4 = g if batched else g[None]
        rows = np.arange(out_h)[:, None] * stride + arg // kernel
        cols = np.arange(out_w)[None, :] * stride + arg % kernel
        nn_ = np.arange(n)[:, None, None, None]
        cc = np.arange(c)[None, :, None, None]
        dx = np.zeros_like(xd)
        np.add.at(dx, (nn_, cc, rows, cols), g4)
        _accumulate(x, dx if batched else dx[0])

    out._backward = _backward
    return out


def _adaptive_bins(size: int, bins: int) -> List[Tuple[int, int]]:
    return [(math.floor(i * size / bins), math.ceil((i + 1) * size / bins)) for i in range(bins)]


def adaptive_maxpool(x: ArrayLike, out_h: int, out_w: int) -> Tensor:
    """Max pool into a fixed out_h x out_w grid of near-equal bins."""
    x = as_tensor(x)
    xd, batched = _batched(x, "adaptive_maxpool")
    n, c, height, width = xd.shape
    if out_h > height:
        raise ShapeError("adaptive_maxpool", "out_h", f"<= H={height}", out_h)
    if out_w > width:
        raise ShapeError("adaptive_maxpool", "out_w", f"<= W={width}", out_w)

    value = np.empty((n, c, out_h, out_w))
    picks = []
    for i, (r0, r1) in enumerate(_adaptive_bins(height, out_h)):
        for j, (c0, c1) in enumerate(_adaptive_bins(width, out_w)):
            region = xd[:, :, r0:r1, c0:c1].reshape(n, c, -1)
            arg = region.argmax(axis=-1)
            value[:, :, i, j] = np.take_along_axis(region, arg[..., None], axis=-1)[..., 0]
            picks.append((i, j, r0 + arg // (c1 - c0), c0 + arg % (c1 - c0)))
    out = Tensor._node(value if batched else value[0], (x,), "adaptive_maxpool")

    def _backward(g):
        g4 = g if batched else g[None]
        nn_ = np.arange(n)[:, None]
        cc = np.arange(c)[None, :]
        dx = np.zeros_like(xd)
        for i, j, rows, cols in picks:
            np.add.at(dx, (nn_, cc, rows, cols), g4[:, :, i, j])
        _accumulate(x, dx if batched else dx[0])

    out._backward = _backward
    return out


def softmax(x: ArrayLike, axis: int = -1) -> Tensor:
    """Numerically stable softmax (max-subtracted) along ``axis``."""
    x = as_tensor(x)
    if not np.all(np.isfinite(x.data)):
        raise NumericalError("softmax: input contains NaN or infinite values")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    value = e / e.sum(axis=axis, keepdims=True)
    out = Tensor._node(value, (x,), "softmax")
    out._backward = lambda g: _accumulate(
        x, value * (g - (g * value).sum(axis=axis, keepdims=True))
    )
    return out


def log_softmax(x: ArrayLike, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if not np.all(np.isfinite(x.data)):
        raise NumericalError("log_softmax: input contains NaN or infinite values")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    value = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = Tensor._node(value, (x,), "log_softmax")
    out._backward = lambda g: _accumulate(
        x, g - np.exp(value) * g.sum(axis=axis, keepdims=True)
    )
    return out


# ============================================================================
# Losses
# ============================================================================


def huber_loss(pred: ArrayLike, target: ArrayLike, delta: float = 1.0) -> Tensor:
    """
    Mean Huber loss.

    Per element: 0.5 * d^2 when |d| <= delta, else delta * (|d| - 0.5 * delta).
    """
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError("huber_loss", "shape", pred.shape, target.shape)
    d = pred.data - target.data
    abs_d = np.abs(d)
    quadratic = abs_d <= delta
    per_element = np.where(quadratic, 0.5 * d * d, delta * (abs_d - 0.5 * delta))
    out = Tensor._node(np.asarray(per_element.mean()), (pred, target), "huber")

    def _backward(g):
        dd = np.where(quadratic, d, delta * np.sign(d)) * (g / d.size)
        _accumulate(pred, dd)
        _accumulate(target, -dd)

    out._backward = _backward
    return out


def mse_loss(pred: ArrayLike, target: ArrayLike) -> Tensor:
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError("mse_loss", "shape", pred.shape, target.shape)
    return mean(square(sub(pred, target)))


# ============================================================================
# Optimisation
# ============================================================================


@dataclass
class AdamState:
    """First/second moment arrays keyed by parameter name, plus the step counter."""

    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    v_max: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, Optional[np.ndarray]],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    amsgrad: bool = False,
) -> Tuple[Mapping[str, Tensor], AdamState]:
    """
    One bias-corrected Adam update, in place.

    A parameter without a gradient is treated as having a zero gradient.
    With ``amsgrad`` the running maximum of the second moment is used in the
    denominator.

    Returns:
        (params, state): the same objects, updated
    """
    if not lr > 0:
        raise NumericalError(f"Adam learning rate must be positive, got {lr}")
    state.step += 1
    t = state.step
    correction1 = 1.0 - beta1**t
    correction2 = 1.0 - beta2**t
    for name, param in params.items():
        grad = grads.get(name)
        if grad is None:
            grad = np.zeros_like(param.data)
        m = state.m.setdefault(name, np.zeros_like(param.data))
        v = state.v.setdefault(name, np.zeros_like(param.data))
        m *= beta1
        m += (1.0 - beta1) * grad
        v *= beta2
        v += (1.0 - beta2) * grad * grad
        if amsgrad:
            v_max = state.v_max.setdefault(name, np.zeros_like(param.data))
            np.maximum(v_max, v, out=v_max)
            second = v_max
        else:
            second = v
        param.data -= lr * (m / correction1) / (np.sqrt(second / correction2) + eps)
    return params, state


class Adam:
    """Adam bound to a named parameter set; reads gradients from ``param.grad``."""

    def __init__(
        self,
        params: Mapping[str, Tensor],
        lr: float,
        betas: Tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        amsgrad: bool = False,
    ):
        if not lr > 0:
            raise NumericalError(f"Adam learning rate must be positive, got {lr}")
        self.params = params
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.amsgrad = amsgrad
        self.state = AdamState()

    def zero_grad(self) -> None:
        for param in self.params.values():
            param.grad = None

    def step(self, grads: Optional[Mapping[str, np.ndarray]] = None) -> None:
        if grads is None:
            grads = {name: p.grad for name, p in self.params.items()}
        adam_step(
            self.params, grads, self.state, self.lr,
            beta1=self.betas[0], beta2=self.betas[1], eps=self.eps, amsgrad=self.amsgrad,
        )


def global_norm(grads: Iterable[Optional[np.ndarray]]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads if g is not None))


def grad_clip_norm(grads, max_norm: float = 10.0):
    """
    Scale gradients so their global L2 norm is at most ``max_norm``.

    Accepts a mapping name -> array or a sequence of arrays and returns the
    same kind of container. Gradients under the limit are returned unchanged.
    """
    values = list(grads.values()) if isinstance(grads, Mapping) else list(grads)
    norm = global_norm(values)
    if norm <= max_norm or norm == 0.0:
        return grads
    factor = max_norm / norm
    if isinstance(grads, Mapping):
        return {k: (None if g is None else g * factor) for k, g in grads.items()}
    return [None if g is None else g * factor for g in values]


# ============================================================================
# Gradient checking
# ============================================================================


@dataclass
class GradcheckReport:
    max_rel_error: float
    worst: str
    checked: int

    @property
    def ok(self) -> bool:
        return self.max_rel_error < 1e-4


def gradcheck(
    fn: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    step: float = 1e-5,
    atol: float = 1e-7,
) -> GradcheckReport:
    """
    Compare autograd gradients of ``fn()`` with central finite differences.

    ``fn`` must rebuild its computation from ``params`` on every call. Element
    errors below ``atol`` in absolute terms count as zero; otherwise the error
    is |analytic - numeric| / max(|analytic|, |numeric|).
    """
    for p in params.values():
        p.grad = None
    with Tape() as tape:
        loss = fn()
    tape.backward(loss)
    analytic = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for name, p in params.items()
    }

    worst, worst_name, checked = 0.0, "", 0
    for name, p in params.items():
        grad = analytic[name].reshape(-1)
        for i in range(p.data.size):
            # index p.data itself; a reshape of a non-contiguous array is a copy
            at = np.unravel_index(i, p.data.shape)
            original = p.data[at]
            p.data[at] = original + step
            plus = fn().item()
            p.data[at] = original - step
            minus = fn().item()
            p.data[at] = original
            numeric = (plus - minus) / (2.0 * step)
            diff = abs(grad[i] - numeric)
            err = 0.0 if diff <= atol else diff / max(abs(grad[i]), abs(numeric))
            checked += 1
            if err > worst:
                worst, worst_name = err, f"{name}[{i}]"
        p.grad = None
    logger.debug("gradcheck: %d elements, max rel error %.3g at %s", checked, worst, worst_name)
    return GradcheckReport(worst, worst_name, checked)
