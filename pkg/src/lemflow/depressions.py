"""Priority-Flood depression filling.

The flood starts from every boundary cell and always expands the lowest
open cell next, so each interior cell is reached through its lowest
possible outlet. Cells below that outlet level are raised to it (exact
mode) or to just above the cell they drain through (epsilon mode, which
leaves no flats).
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass

import numpy as np
from numba import njit

from .grid import Raster, Topology

FILL_MODES = ("off", "exact", "epsilon_ascending")


@dataclass(frozen=True)
class FillOptions:
    mode: str = "exact"
    epsilon_increment: float | None = None  # None: derived from the data

    def __post_init__(self):
        if self.mode not in FILL_MODES:
            raise ValueError(f"fill mode must be one of {FILL_MODES}, got {self.mode!r}")
        if self.epsilon_increment is not None and not self.epsilon_increment > 0:
            raise ValueError("epsilon_increment must be positive")


def default_epsilon(z: np.ndarray) -> float:
    """1e-8 of the elevation range, but never below 16 ulps of the largest magnitude."""
    zmax = float(np.max(np.abs(z))) if z.size else 0.0
    span = float(np.ptp(z)) if z.size else 0.0
    return max(1e-8 * span, 16.0 * float(np.spacing(z.dtype.type(max(zmax, 1.0)))))


@njit(cache=True)
def _priority_flood(z, nbr, boundary, eps, use_eps):
    n = z.size
    closed = np.zeros(n, dtype=np.bool_)
    heap = [(0.0, np.int64(0))]
    heap.pop()
    for c in range(n):
        if boundary[c]:
            closed[c] = True
            heapq.heappush(heap, (np.float64(z[c]), np.int64(c)))
    while len(heap) > 0:
        zc, c = heapq.heappop(heap)
        for k in range(nbr.shape[1]):
            m = nbr[c, k]
            if m < 0 or closed[m]:
                continue
            closed[m] = True
            if use_eps:
                if z[m] <= zc:
                    z[m] = zc + eps
            elif z[m] < zc:
                z[m] = zc
            heapq.heappush(heap, (np.float64(z[m]), m))


def priority_flood_fill(elev, topo: Topology, opts: FillOptions | None = None):
    """Return a filled copy of ``elev`` (a :class:`Raster` or a flat array)."""
    opts = opts or FillOptions()
    is_raster = isinstance(elev, Raster)
    z = (elev.data if is_raster else np.asarray(elev)).copy()
    if opts.mode != "off":
        use_eps = opts.mode == "epsilon_ascending"
        eps = 0.0
        if use_eps:
            eps = opts.epsilon_increment or default_epsilon(z)
        _priority_flood(z, topo.nbr, topo.boundary, float(eps), use_eps)
    return Raster(elev.width, elev.height, z) if is_raster else z
