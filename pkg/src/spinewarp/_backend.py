"""Kernel backend selection.

Hot per-voxel loops (sampling, warping, displacement blending) exist in two
implementations with identical semantics: a numba-jitted one and a pure-numpy
vectorized one. The env var SPINEWARP_BACKEND picks one ("numba", "numpy", or
"auto"); default is numba when importable. SPINEWARP_THREADS caps the numba
thread pool.
"""

import os

_requested = os.environ.get("SPINEWARP_BACKEND", "auto").strip().lower()

if _requested not in ("auto", "numba", "numpy"):
    raise RuntimeError(
        f"SPINEWARP_BACKEND must be 'numba', 'numpy' or 'auto', got {_requested!r}"
    )

if _requested == "numpy":
    BACKEND = "numpy"
else:
    try:
        import numba  # noqa: F401

        BACKEND = "numba"
    except ImportError:
        if _requested == "numba":
            raise
        BACKEND = "numpy"

if BACKEND == "numba":
    import numba

    _threads = os.environ.get("SPINEWARP_THREADS", "").strip()
    if _threads:
        numba.set_num_threads(max(1, min(int(_threads), numba.config.NUMBA_NUM_THREADS)))
    from . import _kernels_numba as kernels
else:
    from . import _kernels_numpy as kernels

__all__ = ["BACKEND", "kernels"]
