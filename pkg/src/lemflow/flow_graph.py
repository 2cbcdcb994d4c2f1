"""Flow routing: receivers, donors and processing orders.

Single-flow (D8) routing sends each cell's flow to its steepest downhill
neighbour. The inverse relation (donors) is stored as a flat table with
``Dmax`` slots per cell. Two processing orders are built from it:

* the breadth-first queue, whose level boundaries delimit sets of mutually
  independent cells, and
* the depth-first stack used by the classic serial integrator, whose
  "levels" are just the boundaries between source trees.

Multiple-flow-direction (MFD) routing splits flow among all downhill
neighbours; its order is built by dependency counting.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit, prange

from .grid import NOFLOW, Raster, Topology


class StructuralError(RuntimeError):
    """The receiver graph is not a forest (a cycle or inconsistent donors)."""


def _values(elev) -> np.ndarray:
    return elev.data if isinstance(elev, Raster) else np.asarray(elev)


# --------------------------------------------------------------------------
# kernels

@njit(inline="always")
def _steepest(c, elev, nbr, ndist):
    smax = 0.0
    nmax = NOFLOW
    dist = 0.0
    e = elev[c]
    for k in range(nbr.shape[1]):
        n = nbr[c, k]
        if n < 0:
            continue
        s = (e - elev[n]) / ndist[c, k]
        if s > smax:
            smax = s
            nmax = n
            dist = ndist[c, k]
    return nmax, dist


@njit(cache=True)
def receivers_serial(elev, nbr, ndist, boundary, rec, rdist):
    for c in range(elev.size):
        if boundary[c]:
            rec[c] = NOFLOW
            rdist[c] = 0.0
        else:
            rec[c], rdist[c] = _steepest(c, elev, nbr, ndist)


@njit(cache=True, parallel=True)
def receivers_parallel(elev, nbr, ndist, boundary, rec, rdist):
    for c in prange(elev.size):
        if boundary[c]:
            rec[c] = NOFLOW
            rdist[c] = 0.0
        else:
            rec[c], rdist[c] = _steepest(c, elev, nbr, ndist)


@njit(inline="always")
def _pull_donors(c, rec, nbr, donor, dmax):
    k = 0
    for j in range(nbr.shape[1]):
        n = nbr[c, j]
        if n >= 0 and rec[n] == c:
            donor[dmax * c + k] = n
            k += 1
    return k


@njit(cache=True)
def donors_serial(rec, nbr, donor, dnum):
    dmax = nbr.shape[1]
    for c in range(rec.size):
        dnum[c] = _pull_donors(c, rec, nbr, donor, dmax)


@njit(cache=True, parallel=True)
def donors_parallel(rec, nbr, donor, dnum):
    dmax = nbr.shape[1]
    for c in prange(rec.size):
        dnum[c] = _pull_donors(c, rec, nbr, donor, dmax)


@njit(cache=True)
def queue_kernel(rec, donor, dnum, dmax, order, levels):
    """Breadth-first order. Returns ``(nqueue, nlevels)``; -1 on overflow."""
    n_cells = rec.size
    nq = 0
    for c in range(n_cells):
        if rec[c] == NOFLOW:
            order[nq] = c
            nq += 1
    levels[0] = 0
    nl = 0
    if nq > 0:
        nl = 1
        levels[1] = nq
    lo = 0
    while lo < nq:
        hi = nq
        for i in range(lo, hi):
            c = order[i]
            for k in range(dnum[c]):
                if nq >= n_cells:
                    return -1, nl
                order[nq] = donor[dmax * c + k]
                nq += 1
        if nq > hi:
            nl += 1
            levels[nl] = nq
        lo = hi
    return nq, nl


@njit(cache=True)
def stack_kernel(rec, donor, dnum, dmax, order, segments, stack):
    """Depth-first (preorder) order, one segment per source tree."""
    n_cells = rec.size
    nq = 0
    ns = 0
    segments[0] = 0
    for s in range(n_cells):
        if rec[s] != NOFLOW:
            continue
        top = 0
        stack[top] = s
        top += 1
        while top > 0:
            top -= 1
            c = stack[top]
            if nq >= n_cells:
                return -1, ns
            order[nq] = c
            nq += 1
            # reversed push so the first donor slot is visited first
            for k in range(dnum[c] - 1, -1, -1):
                if top >= n_cells:
                    return -1, ns
                stack[top] = donor[dmax * c + k]
                top += 1
        ns += 1
        segments[ns] = nq
    return nq, ns


@njit(cache=True)
def mfd_kernel(elev, nbr, ndist, boundary, exponent, recs, weights, nrec):
    for c in range(elev.size):
        nrec[c] = 0
        if boundary[c]:
            continue
        e = elev[c]
        total = 0.0
        k = 0
        for j in range(nbr.shape[1]):
            n = nbr[c, j]
            if n < 0:
                continue
            s = (e - elev[n]) / ndist[c, j]
            if s > 0.0:
                w = s ** exponent
                recs[c, k] = n
                weights[c, k] = w
                total += w
                k += 1
        for j in range(k):
            weights[c, j] = weights[c, j] / total
        nrec[c] = k


@njit(cache=True)
def mfd_donors_kernel(recs, weights, nrec, nbr, donors, dweights, dnum):
    for c in range(nrec.size):
        k = 0
        for j in range(nbr.shape[1]):
            n = nbr[c, j]
            if n < 0:
                continue
            for q in range(nrec[n]):
                if recs[n, q] == c:
                    donors[c, k] = n
                    dweights[c, k] = weights[n, q]
                    k += 1
                    break
        dnum[c] = k


@njit(cache=True)
def mfd_order_kernel(nrec, donors, dnum, order, levels):
    n_cells = nrec.size
    remaining = nrec.copy()
    nq = 0
    for c in range(n_cells):
        if nrec[c] == 0:
            order[nq] = c
            nq += 1
    levels[0] = 0
    nl = 0
    if nq > 0:
        nl = 1
        levels[1] = nq
    lo = 0
    while lo < nq:
        hi = nq
        for i in range(lo, hi):
            c = order[i]
            for k in range(dnum[c]):
                n = donors[c, k]
                remaining[n] -= 1
                if remaining[n] == 0:
                    order[nq] = n
                    nq += 1
        if nq > hi:
            order[hi:nq].sort()
            nl += 1
            levels[nl] = nq
        lo = hi
    return nq, nl


# --------------------------------------------------------------------------
# public API

@dataclass
class FlowGraph:
    """Single-receiver flow graph.

    ``rdist[c]`` is the distance from ``c`` to its receiver (0 for NoFlow).
    ``donor``/``dnum`` are ``None`` until :func:`compute_donors` has run.
    """

    rec: np.ndarray
    rdist: np.ndarray
    dmax: int
    donor: np.ndarray | None = None
    dnum: np.ndarray | None = None

    @property
    def size(self) -> int:
        return self.rec.size

    def has_receiver(self) -> np.ndarray:
        return self.rec != NOFLOW


@dataclass
class TraversalPlan:
    """Processing order plus boundaries into it.

    Level ``l`` is ``order[levels[l]:levels[l + 1]]``. For stack plans the
    "levels" are the source-tree segments.
    """

    order: np.ndarray
    levels: np.ndarray
    kind: str = "queue"

    @property
    def nlevels(self) -> int:
        return self.levels.size - 1

    def level(self, l: int) -> np.ndarray:
        return self.order[self.levels[l] : self.levels[l + 1]]

    def level_of(self) -> np.ndarray:
        """Level index of every cell."""
        out = np.empty(self.order.size, dtype=np.int64)
        for l in range(self.nlevels):
            out[self.level(l)] = l
        return out


def compute_receivers(elev, topo: Topology, parallel: bool = False) -> FlowGraph:
    """Steepest-descent receiver of every cell.

    Slopes are ``(elev[c] - elev[n]) / dist(c, n)``; the first neighbour in
    stencil order with the strictly largest positive slope wins. Boundary
    cells and cells with no downhill neighbour get ``NOFLOW``.
    """
    z = _values(elev)
    rec = np.empty(z.size, dtype=np.int64)
    rdist = np.empty(z.size, dtype=np.float64)
    kernel = receivers_parallel if parallel else receivers_serial
    kernel(z, topo.nbr, topo.ndist, topo.boundary, rec, rdist)
    return FlowGraph(rec, rdist, topo.dmax)


def compute_donors(graph: FlowGraph, topo: Topology, parallel: bool = False) -> FlowGraph:
    """Fill ``graph.donor``/``graph.dnum`` by having each cell scan its neighbours.

    Donor slots follow the stencil order. Returns the same graph.
    """
    donor = np.full(graph.size * topo.dmax, -1, dtype=np.int64)
    dnum = np.empty(graph.size, dtype=np.int64)
    kernel = donors_parallel if parallel else donors_serial
    kernel(graph.rec, topo.nbr, donor, dnum)
    graph.donor, graph.dnum = donor, dnum
    return graph


def route_d8(elev, topo: Topology, parallel: bool = False) -> FlowGraph:
    return compute_donors(compute_receivers(elev, topo, parallel), topo, parallel)


def _require_donors(graph: FlowGraph):
    if graph.donor is None or graph.dnum is None:
        raise ValueError("flow graph has no donor table; call compute_donors first")


def generate_queue(graph: FlowGraph) -> TraversalPlan:
    """Breadth-first level-set order rooted at every NoFlow cell.

    Level 0 holds the NoFlow cells in ascending index order; level ``l+1``
    holds the donors of level ``l`` in queue and donor-slot order. Only
    non-empty levels are recorded.
    """
    _require_donors(graph)
    n = graph.size
    order = np.empty(n, dtype=np.int64)
    levels = np.empty(n + 1, dtype=np.int64)
    nq, nl = queue_kernel(graph.rec, graph.donor, graph.dnum, graph.dmax, order, levels)
    if nq != n:
        raise StructuralError(
            f"queue reached {max(nq, 0)} of {n} cells; receiver graph contains a cycle"
        )
    return TraversalPlan(order, levels[: nl + 1].copy(), "queue")


def generate_stack(graph: FlowGraph) -> TraversalPlan:
    """Depth-first order: each source tree emitted in preorder, donors in slot order."""
    _require_donors(graph)
    n = graph.size
    order = np.empty(n, dtype=np.int64)
    segments = np.empty(n + 1, dtype=np.int64)
    stack = np.empty(n, dtype=np.int64)
    nq, ns = stack_kernel(graph.rec, graph.donor, graph.dnum, graph.dmax, order, segments, stack)
    if nq != n:
        raise StructuralError(
            f"stack reached {max(nq, 0)} of {n} cells; receiver graph contains a cycle"
        )
    return TraversalPlan(order, segments[: ns + 1].copy(), "stack")


@dataclass
class MfdFlowGraph:
    """Multiple-receiver graph with flow fractions.

    ``recs[c, :nrec[c]]`` are the receivers of ``c`` and ``weights`` the
    matching fractions. ``donors``/``dweights``/``dnum`` hold the inverse
    relation in stencil order; ``dnum`` is the in-degree.
    """

    recs: np.ndarray
    weights: np.ndarray
    nrec: np.ndarray
    donors: np.ndarray
    dweights: np.ndarray
    dnum: np.ndarray

    @property
    def indegree(self) -> np.ndarray:
        return self.dnum

    @property
    def size(self) -> int:
        return self.nrec.size

    def receivers_of(self, c: int) -> list[tuple[int, float]]:
        k = int(self.nrec[c])
        return list(zip(self.recs[c, :k].tolist(), self.weights[c, :k].tolist()))

    @classmethod
    def from_arrays(cls, recs, weights, nrec, topo: Topology) -> "MfdFlowGraph":
        n, d = recs.shape
        donors = np.full((n, d), -1, dtype=np.int64)
        dweights = np.zeros((n, d))
        dnum = np.zeros(n, dtype=np.int64)
        mfd_donors_kernel(recs, weights, nrec, topo.nbr, donors, dweights, dnum)
        return cls(recs, weights, nrec, donors, dweights, dnum)

    @classmethod
    def from_receivers(cls, rec: np.ndarray, topo: Topology) -> "MfdFlowGraph":
        """Single-receiver graph expressed as MFD (every fraction is 1)."""
        n, d = rec.size, topo.dmax
        recs = np.full((n, d), -1, dtype=np.int64)
        weights = np.zeros((n, d))
        has = rec != NOFLOW
        recs[has, 0] = rec[has]
        weights[has, 0] = 1.0
        return cls.from_arrays(recs, weights, has.astype(np.int64), topo)

    @classmethod
    def from_edges(cls, edges, topo: Topology) -> "MfdFlowGraph":
        """Graph from explicit ``(donor, receiver)`` pairs with equal splits."""
        n, d = topo.size, topo.dmax
        recs = np.full((n, d), -1, dtype=np.int64)
        weights = np.zeros((n, d))
        nrec = np.zeros(n, dtype=np.int64)
        for src, dst in edges:
            recs[src, nrec[src]] = dst
            nrec[src] += 1
        for c in range(n):
            if nrec[c]:
                weights[c, : nrec[c]] = 1.0 / nrec[c]
        return cls.from_arrays(recs, weights, nrec, topo)


def compute_mfd(elev, topo: Topology, exponent: float = 1.0) -> MfdFlowGraph:
    """Route to every strictly downhill neighbour, weighted by ``slope**exponent``."""
    z = _values(elev)
    n, d = z.size, topo.dmax
    recs = np.full((n, d), -1, dtype=np.int64)
    weights = np.zeros((n, d))
    nrec = np.empty(n, dtype=np.int64)
    mfd_kernel(z, topo.nbr, topo.ndist, topo.boundary, float(exponent), recs, weights, nrec)
    return MfdFlowGraph.from_arrays(recs, weights, nrec, topo)


def generate_mfd_order(mfd: MfdFlowGraph) -> TraversalPlan:
    """Level sets by dependency counting.

    A cell joins the next level once every one of its receivers has been
    placed; cells within a level are sorted by index.
    """
    n = mfd.size
    order = np.empty(n, dtype=np.int64)
    levels = np.empty(n + 1, dtype=np.int64)
    nq, nl = mfd_order_kernel(mfd.nrec, mfd.donors, mfd.dnum, order, levels)
    if nq != n:
        raise StructuralError(f"{n - nq} cells never became ready; MFD graph contains a cycle")
    return TraversalPlan(order, levels[: nl + 1].copy(), "mfd")
