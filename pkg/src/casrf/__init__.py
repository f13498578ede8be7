"""Cascaded plane-sweep radiance fields with pseudo-depth guidance."""

from .autodiff import (
    Tensor,
    no_grad,
    set_default_dtype,
    get_default_dtype,
    debug_numerics,
)

__all__ = [
    "Tensor",
    "no_grad",
    "set_default_dtype",
    "get_default_dtype",
    "debug_numerics",
]

__version__ = "0.1.0"
