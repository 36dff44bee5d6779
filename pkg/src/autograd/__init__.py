"""
Minimal numpy tensor library with reverse-mode autodiff
"""

from .tensor import Tensor, cat, get_default_dtype, no_grad, set_default_dtype, stack

__all__ = ["Tensor", "cat", "stack", "no_grad", "get_default_dtype", "set_default_dtype"]
