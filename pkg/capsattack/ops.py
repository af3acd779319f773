"""
Differentiable operations over :class:`capsattack.Tensor`.

Every function computes its result with numpy and, when one of its inputs
requires gradients, records a node holding the gradient rule. Broadcasting
follows numpy's trailing-dimension rules.
"""
from __future__ import annotations

from typing import Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import special

from capsattack.errors import DomainError, ShapeError
from capsattack.tensor import Tensor, as_tensor, record

__all__ = (
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "scale",
    "relu",
    "sigmoid",
    "log",
    "exp",
    "square",
    "clamp_min",
    "matmul",
    "conv2d",
    "reshape",
    "transpose",
    "sum",
    "mean",
    "softmax",
    "log_softmax",
    "l2_norm",
    "squash",
    "cross_entropy",
    "one_hot",
)

Operand = Union[Tensor, float, int, np.ndarray]
Axis = Optional[Union[int, Tuple[int, ...]]]


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum out the dimensions broadcasting added so `grad` matches `shape`."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for dim, size in enumerate(shape):
        if size == 1 and grad.shape[dim] != 1:
            grad = grad.sum(axis=dim, keepdims=True)
    return grad


def _operands(a: Operand, b: Operand) -> Tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        b = as_tensor(b, like=a)
    else:
        a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
        b = as_tensor(b, like=a)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"shapes {a.shape} and {b.shape} are not broadcastable") from None
    return a, b


def add(a: Operand, b: Operand) -> Tensor:
    a, b = _operands(a, b)
    return record(
        "add",
        a.data + b.data,
        (a, b),
        lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)),
    )


def sub(a: Operand, b: Operand) -> Tensor:
    a, b = _operands(a, b)
    return record(
        "sub",
        a.data - b.data,
        (a, b),
        lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)),
    )


def mul(a: Operand, b: Operand) -> Tensor:
    a, b = _operands(a, b)
    return record(
        "mul",
        a.data * b.data,
        (a, b),
        lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)),
    )


def div(a: Operand, b: Operand) -> Tensor:
    a, b = _operands(a, b)
    out = a.data / b.data

    def grad_fn(g):
        return (
            unbroadcast(g / b.data, a.shape),
            unbroadcast(-g * out / b.data, b.shape),
        )

    return record("div", out, (a, b), grad_fn)


def neg(a: Tensor) -> Tensor:
    return record("neg", -a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, factor: float) -> Tensor:
    factor = a.data.dtype.type(factor)
    return record("scale", a.data * factor, (a,), lambda g: (g * factor,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return record("relu", np.maximum(a.data, 0).astype(a.data.dtype, copy=False), (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    out = special.expit(a.data)
    return record("sigmoid", out, (a,), lambda g: (g * out * (1 - out),))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise DomainError("log of a non-positive value")
    return record("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return record("exp", out, (a,), lambda g: (g * out,))


def square(a: Tensor) -> Tensor:
    return record("square", a.data * a.data, (a,), lambda g: (2 * g * a.data,))


def clamp_min(a: Tensor, low: float) -> Tensor:
    """max(a, low) elementwise; no gradient flows through clamped entries."""
    mask = a.data >= low
    out = np.maximum(a.data, a.data.dtype.type(low))
    return record("clamp_min", out, (a,), lambda g: (g * mask,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """
    Matrix product over the last two axes with a broadcast leading batch.

    Args:
        a: Tensor of shape (..., m, k).
        b: Tensor of shape (..., k, n).
    """
    a, b = _matmul_operands(a, b)
    out = np.matmul(a.data, b.data)

    def grad_fn(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)

    return record("matmul", out, (a, b), grad_fn)


def _matmul_operands(a, b) -> Tuple[Tensor, Tensor]:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul batch dimensions differ: {a.shape} @ {b.shape}") from None
    return a, b


def conv2d(x: Tensor, kernels: Tensor, stride: int = 1) -> Tensor:
    """
    Valid (unpadded) 2-d cross-correlation.

    Args:
        x: Input of shape (c_in, h, w) or batched (b, c_in, h, w).
        kernels: Kernels of shape (c_out, c_in, k, k).
        stride: Positive step between windows.

    Returns:
        A tensor of shape ([b,] c_out, h', w') with h' = floor((h - k) / stride) + 1.
    """
    if stride < 1:
        raise ShapeError(f"stride must be positive, got {stride}")
    unbatched = x.ndim == 3
    if unbatched:
        x = reshape(x, (1,) + x.shape)
    if x.ndim != 4 or kernels.ndim != 4:
        raise ShapeError(f"conv2d expects (b, c, h, w) input and 4-d kernels, got {x.shape} and {kernels.shape}")

    batch, channels, height, width = x.shape
    c_out, c_in, k, k2 = kernels.shape
    if k != k2:
        raise ShapeError("conv2d kernels must be square")
    if c_in != channels:
        raise ShapeError(f"kernels expect {c_in} input channels, got {channels}")
    if k > height or k > width:
        raise ShapeError(f"kernel size {k} exceeds input size {height}x{width}")

    xd = x.data
    kd = kernels.data.astype(xd.dtype, copy=False)
    windows = sliding_window_view(xd, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    out_h, out_w = windows.shape[2], windows.shape[3]
    out = np.tensordot(windows, kd, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)

    def grad_fn(g):
        gk = np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3]))
        gw = np.tensordot(g, kd, axes=([1], [0])).transpose(0, 3, 1, 2, 4, 5)
        gx = np.zeros_like(xd)
        for i in range(k):
            for j in range(k):
                gx[
                    :,
                    :,
                    i : i + stride * (out_h - 1) + 1 : stride,
                    j : j + stride * (out_w - 1) + 1 : stride,
                ] += gw[..., i, j]
        return gx, gk.astype(kernels.data.dtype, copy=False)

    result = record("conv2d", out, (x, kernels), grad_fn)
    if unbatched:
        result = reshape(result, result.shape[1:])
    return result


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError(f"cannot reshape {a.shape} into {tuple(shape)}") from None
    return record("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))
    return record("transpose", out, (a,), lambda g: (g.transpose(inverse),))


def _expand(g: np.ndarray, shape: Tuple[int, ...], axis: Axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        axes = (axis,) if isinstance(axis, int) else axis
        axes = tuple(ax % len(shape) for ax in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def sum(a: Tensor, axis: Axis = None, keepdims: bool = False) -> Tensor:
    out = np.sum(a.data, axis=axis, keepdims=keepdims)
    return record(
        "sum",
        np.asarray(out, dtype=a.data.dtype),
        (a,),
        lambda g: (_expand(g, a.shape, axis, keepdims),),
    )


def mean(a: Tensor, axis: Axis = None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[ax] for ax in axes]))
    out = np.mean(a.data, axis=axis, keepdims=keepdims)
    return record(
        "mean",
        np.asarray(out, dtype=a.data.dtype),
        (a,),
        lambda g: (_expand(g, a.shape, axis, keepdims) / count,),
    )


def _check_axis(a: Tensor, axis: int) -> None:
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"axis {axis} is invalid for shape {a.shape}")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Softmax along `axis`, computed with max subtraction."""
    _check_axis(a, axis)
    out = special.softmax(a.data, axis=axis).astype(a.data.dtype, copy=False)

    def grad_fn(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return record("softmax", out, (a,), grad_fn)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    _check_axis(a, axis)
    out = special.log_softmax(a.data, axis=axis).astype(a.data.dtype, copy=False)

    def grad_fn(g):
        return (g - np.exp(out) * np.sum(g, axis=axis, keepdims=True),)

    return record("log_softmax", out, (a,), grad_fn)


def l2_norm(a: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    """
    Euclidean norm along `axis`. The gradient at the zero vector is defined as 0.
    """
    _check_axis(a, axis)
    norm = np.sqrt(np.sum(a.data * a.data, axis=axis, keepdims=True))

    def grad_fn(g):
        g = g if keepdims else np.expand_dims(g, axis)
        safe = np.where(norm > 0, norm, 1)
        grad = np.where(norm > 0, g * a.data / safe, 0).reshape(a.shape)
        return (grad.astype(a.data.dtype, copy=False),)

    out = norm if keepdims else np.squeeze(norm, axis=axis)
    return record("l2_norm", out, (a,), grad_fn)


def squash(s: Tensor) -> Tensor:
    """
    The capsule nonlinearity along the last axis:
    g(s) = (|s|^2 / (1 + |s|^2)) * s / |s|, with g(0) = 0.

    The output length lies in [0, 1). The Jacobian at s = 0 is its limit, 0.
    """
    sd = s.data
    norm = np.sqrt(np.sum(sd * sd, axis=-1, keepdims=True))
    sq = norm * norm
    factor = norm / (1 + sq)
    out = sd * factor

    def grad_fn(g):
        safe = np.where(norm > 0, norm, 1)
        radial = np.where(norm > 0, (1 - sq) / ((1 + sq) ** 2 * safe), 0)
        projection = np.sum(sd * g, axis=-1, keepdims=True)
        return ((g * factor + sd * projection * radial).astype(sd.dtype, copy=False),)

    return record("squash", out, (s,), grad_fn)


def one_hot(labels: Union[np.ndarray, Sequence[int]], num_classes: int, dtype=np.float32) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise IndexError(f"class index out of range [0, {num_classes})")
    out = np.zeros(labels.shape + (num_classes,), dtype=dtype)
    np.put_along_axis(out, labels[..., None], 1, axis=-1)
    return out


def cross_entropy(logits: Tensor, labels: Union[np.ndarray, Sequence[int]], reduction: str = "sum") -> Tensor:
    """
    Cross-entropy of softmax(logits) against integer labels along the last axis.

    Args:
        logits: Tensor of shape (..., M).
        labels: Integer classes of shape (...).
        reduction: "none" keeps one value per row, "sum" or "mean" reduce them.
    """
    target = one_hot(labels, logits.shape[-1], dtype=logits.data.dtype)
    losses = neg(sum(mul(log_softmax(logits, axis=-1), target), axis=-1))
    if reduction == "none":
        return losses
    if reduction == "mean":
        return mean(losses)
    if reduction == "sum":
        return sum(losses)
    raise ValueError(f"unknown reduction {reduction!r}")
