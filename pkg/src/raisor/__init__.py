"""Recursive adaptive importance sampling with optimal replenishment."""

import numba

# the system TBB can be too old for numba; prefer OpenMP, then the builtin pool
numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]

__version__ = "0.1.0"
