"""Dense float64 tensors, a nestable reverse-mode engine, and seeded RNG streams."""
from . import expr
from .autodiff import finite_difference, grad, max_relative_error
from .expr import Expr, Program, evaluate, label_scope
from .rng import Rng

__all__ = [
    "Expr",
    "Program",
    "Rng",
    "evaluate",
    "expr",
    "finite_difference",
    "grad",
    "label_scope",
    "max_relative_error",
]
