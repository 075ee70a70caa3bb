"""Few-shot RGB + 1D-laser traversability segmentation with negative
prototype matching, built on a small self-contained tensor engine."""

import os

# Pin BLAS pools to one thread before numpy initializes: multi-threaded GEMM
# reorders accumulation and breaks byte-identical reports. Episode-level
# parallelism uses processes instead.
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
             "NUMEXPR_NUM_THREADS", "VECLIB_MAXIMUM_THREADS"):
    os.environ.setdefault(_var, "1")

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    ConfigError,
    ContractError,
    EmptyRegionError,
    NumericError,
    SamplingError,
    ShapeError,
    ValidationError,
)

__all__ = [
    "__version__",
    "ConfigError",
    "ContractError",
    "EmptyRegionError",
    "NumericError",
    "SamplingError",
    "ShapeError",
    "ValidationError",
]
