"""Central finite-difference gradient checking."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class GradCheckReport:
    analytic: np.ndarray
    numeric: np.ndarray
    max_rel_error: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def relative_error(analytic, numeric, floor: float = 1e-6) -> np.ndarray:
    """``|a - n| / max(|a|, |n|, floor)``.

    The floor sits well above the round-off of a central difference at step
    1e-5 (about 1e-11 for unit-scale losses), so an exactly-zero gradient is
    not failed for numeric noise.
    """
    a, n = np.asarray(analytic), np.asarray(numeric)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def numeric_gradient(fn, point, step=1e-5, coords=None):
    x = np.array(point, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in (range(flat.size) if coords is None else coords):
        orig = flat[i]
        flat[i] = orig + step
        up = float(fn(x))
        flat[i] = orig - step
        down = float(fn(x))
        flat[i] = orig
        gflat[i] = (up - down) / (2 * step)
    return grad


def grad_check(fn, point, step: float = 1e-5, tol: float = 1e-4, grad_fn=None, coords=None) -> GradCheckReport:
    """Compare an analytic gradient with central differences.

    ``fn`` maps an ndarray to a scalar. The analytic side comes from ``grad_fn``
    if given, otherwise from running ``fn`` on a leaf tensor and calling
    ``backward``. ``coords`` restricts the check to some flat coordinates.
    """
    from .tensor import Tensor, parameter

    x = np.array(point, dtype=np.float64)
    if grad_fn is None:
        leaf = parameter(x.copy())
        out = fn(leaf)
        out.backward()
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(x)

        def scalar_fn(v):
            r = fn(Tensor(v))
            return r.item() if isinstance(r, Tensor) else r
    else:
        analytic = np.asarray(grad_fn(x.copy()), dtype=np.float64)
        scalar_fn = fn
    numeric = numeric_gradient(scalar_fn, x, step, coords)
    if coords is not None:
        idx = np.asarray(list(coords))
        analytic, numeric = analytic.reshape(-1)[idx], numeric.reshape(-1)[idx]
    err = relative_error(analytic, numeric)
    return GradCheckReport(analytic, numeric, float(err.max()) if err.size else 0.0, tol)
