"""Uplift and implicit stream-power erosion.

Each eroding cell solves, by Newton iteration,

    h - h0 + F * (h - h_r) ** n = 0,    F = K * dt * A**m / dist**n

where ``h0`` is the cell's uplifted elevation and ``h_r`` its receiver's
already-updated elevation. Processing cells after their receivers makes
the scheme implicit; cells of one level never depend on each other.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from numba import njit, prange

from .accumulation import AccumField, accumulate, accumulate_mfd, source_weights
from .flow_graph import (
    FlowGraph,
    TraversalPlan,
    compute_donors,
    compute_mfd,
    compute_receivers,
    generate_mfd_order,
    generate_queue,
    generate_stack,
)
from .grid import NOFLOW, Raster, Topology

PHASES = ("receivers", "donors", "order", "accumulation", "uplift", "erosion")


class ConvergenceError(RuntimeError):
    def __init__(self, cell: int, max_iter: int):
        super().__init__(f"Newton iteration did not converge at cell {cell} within {max_iter} iterations")
        self.cell = cell


@dataclass(frozen=True)
class SimParams:
    """Physical and numerical constants of the stream-power model."""

    K: float = 2e-6
    m_exp: float = 0.5
    n_exp: float = 1.0
    uplift: float = 2e-3
    dt: float = 1000.0
    epsilon: float = 1e-6
    dx: float = 1.0
    dy: float = 1.0
    max_iter: int = 100

    def __post_init__(self):
        checks = (
            ("dt", self.dt > 0),
            ("epsilon", self.epsilon > 0),
            ("K", self.K >= 0),
            ("n_exp", self.n_exp > 0),
            ("dx", self.dx > 0),
            ("dy", self.dy > 0),
            ("max_iter", self.max_iter >= 1),
        )
        for name, ok in checks:
            if not ok:
                raise ValueError(f"{name}={getattr(self, name)!r} is out of range")

    @property
    def cell_area(self) -> float:
        return self.dx * self.dy


# --------------------------------------------------------------------------
# kernels

@njit(cache=True)
def solve_implicit(h0, hn, F, n, eps, max_iter):
    """Newton solve for one cell. Returns ``(h, iterations)``; iterations is -1 on failure.

    Iterates are floored at ``hn``: a cell never erodes below its receiver.
    """
    if not h0 > hn:
        return h0, 0
    h = h0
    hp = h0
    for it in range(1, max_iter + 1):
        d = h - hn
        if d <= 0.0 and n < 1.0:
            # derivative is infinite at the floor, the step is zero
            return hn, it
        f = h - h0 + F * d ** n
        fp = 1.0 + F * n * d ** (n - 1.0)
        h = h - f / fp
        if h < hn:
            h = hn
        delta = h - hp
        hp = h
        if abs(delta) <= eps:
            return h, it
    return h, -1


@njit(inline="always")
def _erode_cell(c, elev, rec, rdist, A, kdt, m, n, eps, max_iter, iters, hn_read):
    hn = elev[rec[c]]
    F = kdt * A[c] ** m / rdist[c] ** n
    h, it = solve_implicit(elev[c], hn, F, n, eps, max_iter)
    elev[c] = h
    iters[c] = it
    if hn_read.size > 0:
        hn_read[c] = hn


@njit(cache=True)
def erode_serial(elev, order, rec, rdist, A, kdt, m, n, eps, max_iter, iters, hn_read):
    for i in range(order.size):
        c = order[i]
        if rec[c] != NOFLOW:
            _erode_cell(c, elev, rec, rdist, A, kdt, m, n, eps, max_iter, iters, hn_read)


@njit(cache=True, parallel=True)
def erode_levels(elev, order, levels, rec, rdist, A, kdt, m, n, eps, max_iter, iters, hn_read):
    for l in range(1, levels.size - 1):
        for i in prange(levels[l], levels[l + 1]):
            _erode_cell(order[i], elev, rec, rdist, A, kdt, m, n, eps, max_iter, iters, hn_read)


@njit(cache=True, parallel=True)
def erode_segments(elev, order, segments, rec, rdist, A, kdt, m, n, eps, max_iter, iters, hn_read):
    for s in prange(segments.size - 1):
        for i in range(segments[s], segments[s + 1]):
            c = order[i]
            if rec[c] != NOFLOW:
                _erode_cell(c, elev, rec, rdist, A, kdt, m, n, eps, max_iter, iters, hn_read)


@njit(cache=True)
def uplift_serial(elev, boundary, udt):
    for c in range(elev.size):
        if not boundary[c]:
            elev[c] += udt[c]


@njit(cache=True, parallel=True)
def uplift_parallel(elev, boundary, udt):
    for c in prange(elev.size):
        if not boundary[c]:
            elev[c] += udt[c]


# --------------------------------------------------------------------------
# public API

def uplift_increment(n: int, params: SimParams, rate=None) -> np.ndarray:
    """Per-cell ``rate * dt``. ``rate`` defaults to ``params.uplift``; arrays allow spatial variation."""
    r = params.uplift if rate is None else rate
    r = np.asarray(r, dtype=np.float64)
    if r.ndim == 0:
        return np.full(n, float(r) * params.dt)
    if r.size != n:
        raise ValueError(f"uplift field has {r.size} entries, expected {n}")
    return r.reshape(-1) * params.dt


def uplift(elev: Raster, params: SimParams, boundary=None, rate=None) -> Raster:
    """Raise every interior cell by ``rate * dt``; the perimeter is fixed."""
    out = elev.copy()
    if boundary is None:
        boundary = Topology.from_grid(elev.width, elev.height).boundary
    uplift_serial(out.data, boundary, uplift_increment(out.size, params, rate))
    return out


def check_convergence(iters: np.ndarray, max_iter: int) -> int:
    """Total Newton iterations; raises :class:`ConvergenceError` on the first failed cell."""
    bad = np.flatnonzero(iters < 0)
    if bad.size:
        raise ConvergenceError(int(bad[0]), max_iter)
    return int(iters.sum())


def erode_array(z: np.ndarray, plan: TraversalPlan, graph: FlowGraph, A: np.ndarray,
                params: SimParams, mode: str = "serial", hn_read=None) -> int:
    """Erode ``z`` in place; returns the total Newton iteration count.

    ``mode`` is ``"serial"`` (plan order), ``"levels"`` (parallel within
    each level) or ``"segments"`` (parallel over stack source trees).
    """
    iters = np.zeros(z.size, dtype=np.int64)
    probe = np.empty(0) if hn_read is None else hn_read
    args = (graph.rec, graph.rdist, A, params.K * params.dt, float(params.m_exp),
            float(params.n_exp), float(params.epsilon), int(params.max_iter), iters, probe)
    if mode == "serial":
        erode_serial(z, plan.order, *args)
    elif mode == "levels":
        erode_levels(z, plan.order, plan.levels, *args)
    elif mode == "segments":
        erode_segments(z, plan.order, plan.levels, *args)
    else:
        raise ValueError(f"unknown erosion mode {mode!r}")
    return check_convergence(iters, params.max_iter)


def erode(elev: Raster, plan: TraversalPlan, graph: FlowGraph, accum: AccumField,
          params: SimParams, parallel: bool = False) -> Raster:
    """Return ``elev`` after one implicit erosion sweep over ``plan``."""
    out = elev.copy()
    mode = "serial"
    if parallel:
        mode = "segments" if plan.kind == "stack" else "levels"
    erode_array(out.data, plan, graph, np.asarray(accum.values, dtype=np.float64), params, mode)
    return out


@dataclass
class StepResult:
    timings: dict = field(default_factory=dict)
    newton_iterations: int = 0
    max_change: float = 0.0
    interior_pits: int = 0
    graph: FlowGraph | None = None


@dataclass
class SimState:
    """Evolving terrain plus the fixed inputs of a run."""

    elev: Raster
    topo: Topology
    weights: np.ndarray | None = None
    uplift_rate: object = None
    routing: str = "d8"
    mfd_exponent: float = 1.0
    steps_done: int = 0
    last: StepResult | None = None

    @classmethod
    def from_raster(cls, elev: Raster, params: SimParams, connectivity: int = 8, **kw) -> "SimState":
        from .grid import Neighborhood

        topo = Topology.from_grid(elev.width, elev.height, Neighborhood(connectivity, params.dx, params.dy))
        return cls(elev.copy(), topo, **kw)


class _Clock:
    def __init__(self):
        self.times = {}
        self._t = time.perf_counter()

    def lap(self, phase: str):
        now = time.perf_counter()
        self.times[phase] = self.times.get(phase, 0.0) + (now - self._t)
        self._t = now


def step(state: SimState, params: SimParams, *, order: str = "queue", erosion: str = "serial",
         parallel: bool = False, hn_read: np.ndarray | None = None) -> SimState:
    """Advance ``state`` by one timestep.

    Phases run in order: receivers, donors, processing order, accumulation,
    uplift, erosion. The defaults give the serial breadth-first pipeline.
    ``order="stack"`` switches to the depth-first order, ``erosion`` picks
    the erosion loop (see :func:`erode_array`) and ``parallel`` runs the
    per-cell and per-level phases in parallel. Every combination yields the
    same bits. Diagnostics land in ``state.last``.
    """
    z = state.elev.data
    topo = state.topo
    before = z.copy()
    clock = _Clock()

    graph = compute_receivers(z, topo, parallel)
    mfd = compute_mfd(z, topo, state.mfd_exponent) if state.routing == "mfd" else None
    clock.lap("receivers")
    compute_donors(graph, topo, parallel)
    clock.lap("donors")
    plan = generate_stack(graph) if order == "stack" else generate_queue(graph)
    mfd_plan = generate_mfd_order(mfd) if mfd is not None else None
    clock.lap("order")
    w = source_weights(z.size, state.weights, topo.cell_area)
    if mfd is None:
        A = accumulate(plan, graph, w, parallel=parallel).values
    else:
        A = accumulate_mfd(mfd_plan, mfd, w, parallel=parallel).values
    clock.lap("accumulation")
    udt = uplift_increment(z.size, params, state.uplift_rate)
    (uplift_parallel if parallel else uplift_serial)(z, topo.boundary, udt)
    clock.lap("uplift")
    iters = erode_array(z, plan, graph, A, params, erosion, hn_read)
    clock.lap("erosion")

    state.steps_done += 1
    state.last = StepResult(
        clock.times,
        iters,
        float(np.max(np.abs(z - before))),
        int(np.count_nonzero(~graph.has_receiver() & ~topo.boundary)),
        graph,
    )
    return state
