"""Hot numeric kernels with two interchangeable backends.

The numba backend JIT-compiles direct loops; the numpy backend uses
im2col/col2im built on BLAS matmuls. Selection happens once at import
via REROUTE_KERNELS; both remain importable for equivalence tests and
benchmarks.
"""
from .. import _env
from . import _numpy

if _env.NUMBA_AVAILABLE:
    from . import _numba
else:  # pragma: no cover - exercised only on numba-less installs
    _numba = None

_backends = {"numpy": _numpy}
if _numba is not None:
    _backends["numba"] = _numba

active = _backends[_env.KERNEL_BACKEND]

conv2d_forward = active.conv2d_forward
conv2d_backward_input = active.conv2d_backward_input
conv2d_backward_weight = active.conv2d_backward_weight
maxpool_forward = active.maxpool_forward
maxpool_backward = active.maxpool_backward


def get_backend(name):
    """Return the kernel module for 'numpy' or 'numba'."""
    if name not in _backends:
        raise KeyError(f"kernel backend {name!r} not available (have {sorted(_backends)})")
    return _backends[name]


def available_backends():
    return sorted(_backends)
