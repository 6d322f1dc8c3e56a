"""Kernel backend selection.

The hot numeric kernels exist twice: numba-compiled and pure numpy.  The
``DPZV_BACKEND`` environment variable picks one at import time:

    DPZV_BACKEND=numba   force the compiled kernels (error if numba missing)
    DPZV_BACKEND=numpy   force the pure-numpy fallback
    (unset)              numba when importable, numpy otherwise

Results agree between backends to float tolerance, not bit-for-bit;
determinism guarantees (identical seeds => identical traces) hold within a
fixed backend.  ``benchmarks/bench_kernels.py`` compares the two.
"""

import os


def _select():
    choice = os.environ.get("DPZV_BACKEND", "").strip().lower()
    if choice not in ("", "numba", "numpy"):
        raise ValueError(f"DPZV_BACKEND must be 'numba' or 'numpy', got {choice!r}")
    if choice == "numpy":
        from . import _kernels_numpy as impl
        return impl
    if choice == "numba":
        from . import _kernels_numba as impl
        return impl
    try:
        from . import _kernels_numba as impl
    except ImportError:
        from . import _kernels_numpy as impl
    return impl


kernels = _select()


def backend_name():
    return kernels.NAME
