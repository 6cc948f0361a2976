"""Minimal reverse-mode differentiation over dense float64 arrays."""
from . import ops
from .check import GradCheckReport, grad_check, numeric_gradient, relative_error
from .tensor import Tensor, as_tensor, parameter

__all__ = ["ops", "Tensor", "as_tensor", "parameter", "grad_check", "numeric_gradient", "relative_error", "GradCheckReport"]
