"""reroute: dynamic routing through pools of residual computational units.

A self-contained numpy/numba stack: tape-based autodiff tensors, selection
estimators (softmax, Gumbel-Softmax, straight-through, top-k, REINFORCE),
routed residual networks, staged training pipelines, and route analytics.
"""
from .tensor import Tensor, no_grad, set_default_dtype, default_dtype, use_dtype

__all__ = ["Tensor", "no_grad", "set_default_dtype", "default_dtype", "use_dtype"]

__version__ = "0.1.0"
