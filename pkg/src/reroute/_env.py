"""Process-level switches read from environment variables.

REROUTE_KERNELS       "numba" (default when numba imports) or "numpy".
REROUTE_DETERMINISTIC "1" forces 64-bit default dtype and single-threaded kernels.
"""
import os

import numpy as np

try:
    import numba  # noqa: F401

    NUMBA_AVAILABLE = True
except ImportError:
    NUMBA_AVAILABLE = False

DETERMINISTIC = os.environ.get("REROUTE_DETERMINISTIC", "") == "1"

# Default is the BLAS-backed numpy path: benchmarks/bench_kernels.py shows it
# beating the compiled loops on single-core hosts. REROUTE_KERNELS=numba opts
# into the njit kernels.
_kernel_choice = os.environ.get("REROUTE_KERNELS", "").strip().lower()
if _kernel_choice not in ("", "numba", "numpy"):
    raise ValueError(f"REROUTE_KERNELS must be 'numba' or 'numpy', got {_kernel_choice!r}")
if _kernel_choice == "":
    _kernel_choice = "numpy"
if _kernel_choice == "numba" and not NUMBA_AVAILABLE:
    _kernel_choice = "numpy"

KERNEL_BACKEND = _kernel_choice

DEFAULT_DTYPE = np.float64 if DETERMINISTIC else np.float32

if DETERMINISTIC and NUMBA_AVAILABLE:
    # Kernels are already sequential; this pins the layer so numba never spawns workers.
    os.environ.setdefault("NUMBA_NUM_THREADS", "1")
