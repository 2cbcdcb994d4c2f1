"""Landscape evolution with deterministic breadth-first parallel strategies."""

import os

import numba

# prefer layers that do not probe the system TBB (avoids a noisy version warning)
if "NUMBA_THREADING_LAYER" not in os.environ:
    numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]
