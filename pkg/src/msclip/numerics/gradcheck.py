"""Finite-difference gradient oracle.

central differences in float64 are the independent reference every
analytic backward pass is checked against.
"""

from __future__ import annotations

import numpy as np

from ..errors import ContractError
from .engine import Tensor


def finite_diff_grad(f, x: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, one element at a time.

    ``f`` maps a Tensor to a scalar (Tensor or float) and must be
    deterministic; ``x`` should be float64 for usable accuracy.
    """
    if h <= 0:
        raise ContractError(f"finite difference step must be positive, got {h}")
    base = x.data.copy()
    grad = np.zeros_like(base)
    flat_base = base.reshape(-1)
    flat_grad = grad.reshape(-1)
    for i in range(flat_base.size):
        orig = flat_base[i]
        flat_base[i] = orig + h
        f_plus = _scalar(f(Tensor(base.copy())))
        flat_base[i] = orig - h
        f_minus = _scalar(f(Tensor(base.copy())))
        flat_base[i] = orig
        flat_grad[i] = (f_plus - f_minus) / (2.0 * h)
    return grad


def _scalar(value) -> float:
    if isinstance(value, Tensor):
        if value.size != 1:
            raise ContractError(f"oracle function must return a scalar, got shape {value.shape}")
        return value.item()
    return float(value)


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Elementwise |a - n| / max(|a|, |n|, floor), reduced to the worst case."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float((np.abs(analytic - numeric) / denom).max())
