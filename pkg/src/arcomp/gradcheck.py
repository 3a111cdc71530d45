"""Central finite-difference checks for tape gradients."""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import ndcore as nd
from .ndcore import Tensor


def numerical_gradient(f: Callable[[], float], array: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """d f / d array by central differences; ``array`` is perturbed in place and restored."""
    grad = np.zeros(array.shape)
    for idx in np.ndindex(array.shape):
        original = array[idx]
        array[idx] = original + step
        plus = f()
        array[idx] = original - step
        minus = f()
        array[idx] = original
        grad[idx] = (plus - minus) / (2.0 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-10) -> float:
    """max |a - n| / max(max |a|, max |n|): a scale-aware error for a whole group."""
    scale = max(float(np.max(np.abs(analytic), initial=0.0)), float(np.max(np.abs(numeric), initial=0.0)), floor)
    return float(np.max(np.abs(analytic - numeric), initial=0.0)) / scale


def check_gradients(loss_fn: Callable[[], Tensor], params: dict[str, Tensor],
                    step: float = 1e-5) -> dict[str, float]:
    """Relative error between tape and finite-difference gradients per parameter."""
    nd.zero_grads(params.values())
    loss_fn().backward()
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}

    def value() -> float:
        with nd.no_grad():
            return loss_fn().item()

    errors = {}
    for name, p in params.items():
        numeric = numerical_gradient(value, p.data, step)
        errors[name] = relative_error(analytic[name], numeric)
    return errors
