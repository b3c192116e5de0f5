"""Kernel backend selection.

The env var MSTD_BACKEND picks the implementation of the hot kernels:

    MSTD_BACKEND=numba   use the JIT-compiled kernels (error if numba missing)
    MSTD_BACKEND=numpy   force the pure-numpy fallback
    unset                numba when importable, numpy otherwise

Selection happens once at import; everything downstream calls through the
`kernels` alias. `benchmarks/bench_kernels.py` times the two paths side by
side.
"""

from __future__ import annotations

import os

from . import kernels_numpy

_requested = os.environ.get("MSTD_BACKEND", "").strip().lower()

if _requested not in ("", "numba", "numpy"):
    raise RuntimeError(
        f"MSTD_BACKEND={_requested!r} not recognized; use 'numba' or 'numpy'"
    )

if _requested == "numpy":
    kernels = kernels_numpy
    BACKEND = "numpy"
else:
    try:
        from . import kernels_numba

        kernels = kernels_numba
        BACKEND = "numba"
    except ImportError:
        if _requested == "numba":
            raise RuntimeError("MSTD_BACKEND=numba but numba is not importable")
        kernels = kernels_numpy
        BACKEND = "numpy"


def backend_name() -> str:
    return BACKEND
