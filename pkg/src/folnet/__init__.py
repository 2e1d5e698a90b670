"""Dual-branch logic-operator network with a minimal autograd engine."""

from folnet.tensor import Tensor, RngState, finite_diff_grad

__all__ = ["Tensor", "RngState", "finite_diff_grad"]
__version__ = "0.1.0"
