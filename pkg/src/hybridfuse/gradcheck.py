"""Central finite-difference gradient checks."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, backward

STEP = 1e-5
TOLERANCE = 1e-6


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """||a - n|| / max(||a||, ||n||); zero when both vanish."""
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / scale)


def numeric_grad(fn: Callable[[], Tensor], param: Tensor, step: float = STEP) -> np.ndarray:
    # perturb in place through a flat view, so the array must be contiguous
    param.data = np.ascontiguousarray(param.data)
    out = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    g = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        f_plus = fn().item()
        flat[i] = orig - step
        f_minus = fn().item()
        flat[i] = orig
        g[i] = (f_plus - f_minus) / (2.0 * step)
    return out


def check_gradients(
    fn: Callable[[], Tensor], params: Sequence[Tensor], step: float = STEP
) -> dict[str, float]:
    """Relative error between backprop and finite differences, per parameter.

    ``fn`` must rebuild the graph from the current parameter values and
    return a scalar tensor.
    """
    for p in params:
        p.zero_grad()
    backward(fn())
    errors = {}
    for i, p in enumerate(params):
        key = p.name or f"param{i}"
        errors[key] = relative_error(p.grad, numeric_grad(fn, p, step))
    return errors


def weighted_sum(y: Tensor, weights: np.ndarray) -> Tensor:
    """sum(y * weights); with random weights no output direction cancels out."""
    return ad.sum(ad.mul_elementwise(y, Tensor(weights)))
