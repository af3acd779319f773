from typing import Callable

import numpy as np

from capsattack.errors import ContractError
from capsattack.tensor import Tensor, backward, no_grad

__all__ = ("grad_check", "numeric_gradient")

DEFAULT_STEP = 1e-5


def numeric_gradient(f: Callable[[Tensor], Tensor], x: Tensor, h: float = DEFAULT_STEP) -> np.ndarray:
    """Central differences of the scalar function `f` at `x`, one coordinate at a time."""
    flat = x.data.reshape(-1)
    grad = np.zeros_like(flat)
    with no_grad():
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + h
            upper = f(x).item()
            flat[i] = original - h
            lower = f(x).item()
            flat[i] = original
            grad[i] = (upper - lower) / (2 * h)
    return grad.reshape(x.shape)


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = DEFAULT_STEP) -> float:
    """
    Compare the reverse-mode gradient of `f` at `x` against central differences.

    `x` is perturbed in place and restored, so it may be a model parameter that
    `f` closes over. Both `x` and the graph of `f` must be in double precision.

    Args:
        f:
            A function returning a scalar tensor.
        x:
            The tensor to differentiate with respect to.
        h:
            The finite-difference step.

    Returns:
        max over coordinates of |analytic - numeric| / max(1, |analytic|).
    """
    if x.data.dtype != np.float64:
        raise ContractError("grad_check runs in double precision, convert the tensor first")

    saved_flag, saved_grad = x.requires_grad, x.grad
    x.requires_grad, x.grad = True, None
    try:
        loss = f(x)
        if loss.size != 1:
            raise ContractError(f"grad_check needs a scalar function, got shape {loss.shape}")
        backward(loss)
        analytic = np.zeros_like(x.data) if x.grad is None else x.grad
        numeric = numeric_gradient(f, x, h)
    finally:
        x.requires_grad, x.grad = saved_flag, saved_grad

    error = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(error.max()) if error.size else 0.0
