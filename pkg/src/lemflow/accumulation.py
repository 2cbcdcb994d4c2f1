"""Flow accumulation over a traversal plan.

Each cell's value is its own source weight plus the accumulation of its
donors, summed in donor-slot order. The summation order is fixed per cell,
so serial and level-parallel runs give bit-identical results.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit, prange

from .flow_graph import FlowGraph, MfdFlowGraph, TraversalPlan


@dataclass
class AccumField:
    values: np.ndarray
    cell_area: float = 1.0


@njit(inline="always")
def _gather(c, A, w, donor, dnum, dmax):
    a = w[c]
    base = dmax * c
    for k in range(dnum[c]):
        a += A[donor[base + k]]
    return a


@njit(cache=True)
def accumulate_serial(order, donor, dnum, dmax, w, A):
    for i in range(order.size - 1, -1, -1):
        c = order[i]
        A[c] = _gather(c, A, w, donor, dnum, dmax)


@njit(cache=True, parallel=True)
def accumulate_levels(order, levels, donor, dnum, dmax, w, A):
    for l in range(levels.size - 2, -1, -1):
        for i in prange(levels[l], levels[l + 1]):
            c = order[i]
            A[c] = _gather(c, A, w, donor, dnum, dmax)


@njit(inline="always")
def _gather_mfd(c, A, w, donors, dweights, dnum):
    a = w[c]
    for k in range(dnum[c]):
        a += dweights[c, k] * A[donors[c, k]]
    return a


@njit(cache=True)
def accumulate_mfd_serial(order, donors, dweights, dnum, w, A):
    for i in range(order.size - 1, -1, -1):
        c = order[i]
        A[c] = _gather_mfd(c, A, w, donors, dweights, dnum)


@njit(cache=True, parallel=True)
def accumulate_mfd_levels(order, levels, donors, dweights, dnum, w, A):
    for l in range(levels.size - 2, -1, -1):
        for i in prange(levels[l], levels[l + 1]):
            c = order[i]
            A[c] = _gather_mfd(c, A, w, donors, dweights, dnum)


def source_weights(n: int, weights=None, cell_area: float = 1.0) -> np.ndarray:
    """Per-cell source amounts; ``None`` means one cell area everywhere."""
    if weights is None:
        return np.full(n, float(cell_area))
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim == 0:
        return np.full(n, float(w))
    if w.size != n:
        raise ValueError(f"weights have {w.size} entries, expected {n}")
    return np.ascontiguousarray(w.reshape(-1))


def accumulate(plan: TraversalPlan, graph: FlowGraph, weights=None, cell_area: float = 1.0,
               parallel: bool = False) -> AccumField:
    """D8 flow accumulation, leaves first.

    With ``parallel=True`` the plan's levels are processed from last to
    first with the cells of one level in parallel; the result is the same.
    """
    w = source_weights(graph.size, weights, cell_area)
    A = np.empty(graph.size, dtype=np.float64)
    if parallel and plan.kind != "stack":
        accumulate_levels(plan.order, plan.levels, graph.donor, graph.dnum, graph.dmax, w, A)
    else:
        accumulate_serial(plan.order, graph.donor, graph.dnum, graph.dmax, w, A)
    return AccumField(A, cell_area)


def accumulate_mfd(plan: TraversalPlan, mfd: MfdFlowGraph, weights=None, cell_area: float = 1.0,
                   parallel: bool = False) -> AccumField:
    """MFD accumulation: ``A[c] = w[c] + sum(alpha(n, c) * A[n])`` over donors ``n``."""
    w = source_weights(mfd.size, weights, cell_area)
    A = np.empty(mfd.size, dtype=np.float64)
    if parallel:
        accumulate_mfd_levels(plan.order, plan.levels, mfd.donors, mfd.dweights, mfd.dnum, w, A)
    else:
        accumulate_mfd_serial(plan.order, mfd.donors, mfd.dweights, mfd.dnum, w, A)
    return AccumField(A, cell_area)
