"""Multi-stage cross-modal distillation with a routed mixture of teachers."""

import os as _os

# Cap BLAS threading before numpy first loads: the models here are far too
# small for multithreaded GEMM to pay off, and single-threaded kernels keep
# runtimes reproducible. MSTD_THREADS raises the cap; explicit BLAS env vars
# set by the user are respected (setdefault). No effect if numpy is already
# imported.
_threads = _os.environ.get("MSTD_THREADS", "1")
if not _threads.isdigit() or int(_threads) < 1:
    _threads = "1"
for _var in (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "VECLIB_MAXIMUM_THREADS",
    "NUMEXPR_NUM_THREADS",
):
    _os.environ.setdefault(_var, _threads)
del _os, _threads, _var

__version__ = "0.1.0"

from .backend import BACKEND, backend_name
from .errors import (
    CheckpointError,
    ConfigError,
    DataFormatError,
    DimensionError,
    DivergenceError,
    GraphError,
    MissingArtifactError,
    MstdError,
)
from .tensor import Parameter, Tensor, backward, no_grad

__all__ = [
    "BACKEND",
    "backend_name",
    "CheckpointError",
    "ConfigError",
    "DataFormatError",
    "DimensionError",
    "DivergenceError",
    "GraphError",
    "MissingArtifactError",
    "MstdError",
    "Parameter",
    "Tensor",
    "backward",
    "no_grad",
    "__version__",
]
