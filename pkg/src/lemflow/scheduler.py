"""Execution strategies and the simulation driver.

===================  =====  ==========================================
kind                 order  parallel work
===================  =====  ==========================================
``bw_serial``        stack  none
``rb_serial``        queue  none
``bw_par_erosion``   stack  erosion, one task per source tree
``rb_par_erosion``   queue  erosion, cells of a level in parallel
``rb_par_all``       queue  every per-cell and per-level phase
``rb_private_queues`` queue each worker owns a contiguous block of sources
                            and runs donors, queue, accumulation, uplift
                            and erosion over its own forest
===================  =====  ==========================================

All strategies produce byte-identical elevations for any worker count:
every cell is written by exactly one task and reads only values that are
final by the time it runs, and per-cell arithmetic never depends on the
schedule.
"""

from __future__ import annotations

import contextlib
import time
from dataclasses import dataclass, field

import numba
import numpy as np
from numba import njit, prange

from .accumulation import _gather, source_weights
from .depressions import FillOptions, priority_flood_fill
from .erosion import (
    PHASES,
    SimParams,
    SimState,
    StepResult,
    _erode_cell,
    check_convergence,
    step,
    uplift_increment,
)
from .flow_graph import (
    TraversalPlan,
    _pull_donors,
    compute_receivers,
)
from .grid import NOFLOW, Neighborhood, Raster, Topology

STRATEGY_KINDS = (
    "bw_serial",
    "rb_serial",
    "bw_par_erosion",
    "rb_par_erosion",
    "rb_par_all",
    "rb_private_queues",
)
SERIAL_KINDS = ("bw_serial", "rb_serial")

# knobs passed to erosion.step for the level/stack strategies
_STEP_KNOBS = {
    "bw_serial": dict(order="stack", erosion="serial", parallel=False),
    "rb_serial": dict(order="queue", erosion="serial", parallel=False),
    "bw_par_erosion": dict(order="stack", erosion="segments", parallel=False),
    "rb_par_erosion": dict(order="queue", erosion="levels", parallel=False),
    "rb_par_all": dict(order="queue", erosion="levels", parallel=True),
}


class OrderingViolation(AssertionError):
    """A cell was eroded before its receiver's final elevation was available."""


def check_combination(kind: str, routing: str = "d8") -> None:
    if kind not in STRATEGY_KINDS:
        raise ValueError(f"unknown strategy {kind!r}")
    if routing == "mfd" and kind != "rb_serial" and not kind.startswith("rb_par"):
        # stack orders are D8-only; private forests need single receivers
        raise ValueError(f"strategy {kind} cannot be combined with MFD routing")


@dataclass(frozen=True)
class Strategy:
    kind: str = "rb_serial"
    workers: int = 1

    def __post_init__(self):
        check_combination(self.kind)
        if self.workers < 1:
            raise ValueError(f"workers must be >= 1, got {self.workers}")

    @property
    def serial(self) -> bool:
        return self.kind in SERIAL_KINDS

    @property
    def label(self) -> str:
        return self.kind if self.serial else f"{self.kind}@{self.workers}"


@dataclass
class PhaseTimings:
    """Per-step wall-clock seconds for each phase."""

    steps: list[dict[str, float]] = field(default_factory=list)

    def add(self, times: dict[str, float]) -> None:
        self.steps.append(dict(times))

    @property
    def phases(self) -> list[str]:
        seen = []
        for s in self.steps:
            seen.extend(p for p in s if p not in seen)
        return seen

    def totals(self) -> dict[str, float]:
        out = {p: 0.0 for p in self.phases}
        for s in self.steps:
            for p, t in s.items():
                out[p] += t
        return out

    def total(self) -> float:
        return sum(self.totals().values())

    def share(self, phase: str) -> float:
        """Fraction of the summed phase time spent in ``phase``."""
        total = self.total()
        return self.totals().get(phase, 0.0) / total if total > 0 else 0.0


@dataclass
class SimulationResult:
    raster: Raster
    timings: PhaseTimings
    strategy: Strategy
    steps: int
    newton_iterations: int = 0
    worker_cells: list[list[int]] = field(default_factory=list)
    wall_time: float = 0.0
    interior_pits: list[int] = field(default_factory=list)


# --------------------------------------------------------------------------
# private queues

def partition_sources(rec: np.ndarray, workers: int) -> list[np.ndarray]:
    """Split the NoFlow cells into ``workers`` contiguous, count-balanced blocks."""
    sources = np.flatnonzero(rec == NOFLOW).astype(np.int64)
    return np.array_split(sources, workers)


def _bounds(parts: list[np.ndarray]) -> np.ndarray:
    return np.concatenate(([0], np.cumsum([p.size for p in parts]))).astype(np.int64)


@njit(cache=True)
def private_queue(sources, rec, nbr, donor, dnum, q, levels):
    """Breadth-first queue over the forest rooted at ``sources``.

    Donors are pulled as each cell is dequeued, so only the worker that
    owns a cell ever writes its donor slots. Level boundaries are recorded
    when ``levels`` has room for them.
    """
    dmax = nbr.shape[1]
    record = levels.size > 1
    nq = 0
    for s in sources:
        q[nq] = s
        nq += 1
    nl = 0
    if record:
        levels[0] = 0
        if nq > 0:
            nl = 1
            levels[1] = nq
    lo = 0
    while lo < nq:
        hi = nq
        for i in range(lo, hi):
            c = q[i]
            k = _pull_donors(c, rec, nbr, donor, dmax)
            dnum[c] = k
            for j in range(k):
                q[nq] = donor[dmax * c + j]
                nq += 1
        if record and nq > hi:
            nl += 1
            levels[nl] = nq
        lo = hi
    return nq, nl


@njit(cache=True, parallel=True)
def private_pipeline(elev, rec, rdist, nbr, boundary, sources, bounds, w, udt,
                     kdt, m, n, eps, max_iter, donor, dnum, A, iters, hn_read, counts):
    n_cells = elev.size
    dmax = nbr.shape[1]
    no_levels = np.empty(1, dtype=np.int64)
    for p in prange(bounds.size - 1):
        q = np.empty(n_cells, dtype=np.int64)
        nq, nl = private_queue(sources[bounds[p]:bounds[p + 1]], rec, nbr, donor, dnum, q, no_levels)
        for i in range(nq - 1, -1, -1):
            c = q[i]
            A[c] = _gather(c, A, w, donor, dnum, dmax)
        for i in range(nq):
            c = q[i]
            if not boundary[c]:
                elev[c] += udt[c]
        for i in range(nq):
            c = q[i]
            if rec[c] != NOFLOW:
                _erode_cell(c, elev, rec, rdist, A, kdt, m, n, eps, max_iter, iters, hn_read)
        counts[p] = nq


def private_plans(rec: np.ndarray, topo: Topology, workers: int) -> list[TraversalPlan]:
    """Each worker's private breadth-first plan (for inspection and tests)."""
    n = rec.size
    donor = np.full(n * topo.dmax, -1, dtype=np.int64)
    dnum = np.zeros(n, dtype=np.int64)
    plans = []
    for part in partition_sources(rec, workers):
        q = np.empty(n, dtype=np.int64)
        levels = np.empty(n + 1, dtype=np.int64)
        nq, nl = private_queue(part, rec, topo.nbr, donor, dnum, q, levels)
        plans.append(TraversalPlan(q[:nq].copy(), levels[: nl + 1].copy() if nq else np.zeros(1, np.int64)))
    return plans


def _private_step(state: SimState, params: SimParams, workers: int, hn_read=None) -> list[int]:
    z = state.elev.data
    topo = state.topo
    before = z.copy()
    t0 = time.perf_counter()
    graph = compute_receivers(z, topo, parallel=True)
    t1 = time.perf_counter()
    parts = partition_sources(graph.rec, workers)
    n = z.size
    donor = np.empty(n * topo.dmax, dtype=np.int64)
    dnum = np.zeros(n, dtype=np.int64)
    A = np.empty(n, dtype=np.float64)
    iters = np.zeros(n, dtype=np.int64)
    counts = np.zeros(workers, dtype=np.int64)
    private_pipeline(
        z, graph.rec, graph.rdist, topo.nbr, topo.boundary,
        np.concatenate(parts), _bounds(parts),
        source_weights(n, state.weights, topo.cell_area),
        uplift_increment(n, params, state.uplift_rate),
        params.K * params.dt, float(params.m_exp), float(params.n_exp),
        float(params.epsilon), int(params.max_iter),
        donor, dnum, A, iters, np.empty(0) if hn_read is None else hn_read, counts,
    )
    t2 = time.perf_counter()
    total_iters = check_convergence(iters, params.max_iter)
    graph.donor, graph.dnum = donor, dnum
    state.steps_done += 1
    state.last = StepResult(
        {"receivers": t1 - t0, "private_pipeline": t2 - t1},
        total_iters,
        float(np.max(np.abs(z - before))),
        int(np.count_nonzero(~graph.has_receiver() & ~topo.boundary)),
        graph,
    )
    return counts.tolist()


# --------------------------------------------------------------------------
# driver

@contextlib.contextmanager
def _threads(workers: int):
    """Use up to ``workers`` numba threads, capped at what the runtime offers."""
    previous = numba.get_num_threads()
    numba.set_num_threads(max(1, min(workers, numba.config.NUMBA_NUM_THREADS)))
    try:
        yield
    finally:
        numba.set_num_threads(previous)


def run_step(state: SimState, params: SimParams, strategy: Strategy, debug: bool = False) -> list[int]:
    """Advance ``state`` one timestep under ``strategy``.

    Returns per-worker processed-cell counts (private queues only). With
    ``debug`` every eroded cell records the receiver elevation it read,
    which must equal the receiver's final elevation.
    """
    probe = np.full(state.elev.size, np.nan) if debug else None
    counts = []
    with _threads(1 if strategy.serial else strategy.workers):
        if strategy.kind == "rb_private_queues":
            if state.routing != "d8":
                raise ValueError("private queues require D8 routing")
            counts = _private_step(state, params, strategy.workers, probe)
        else:
            step(state, params, hn_read=probe, **_STEP_KNOBS[strategy.kind])
    if debug:
        _check_ordering(state, probe)
    return counts


def _check_ordering(state: SimState, probe: np.ndarray) -> None:
    rec = state.last.graph.rec
    eroded = np.flatnonzero(~np.isnan(probe))
    final = state.elev.data[rec[eroded]]
    bad = eroded[probe[eroded] != final]
    if bad.size:
        c = int(bad[0])
        raise OrderingViolation(f"cell {c} read receiver {int(rec[c])} before it was final")


def initial_terrain(config) -> Raster:
    from .terrain_io import generate_terrain

    return generate_terrain(config.width, config.height, config.seed)


def prepare_state(config, initial: Raster | None = None) -> SimState:
    elev = initial.copy() if initial is not None else initial_terrain(config)
    if not np.all(np.isfinite(elev.data)):
        raise ValueError("initial terrain contains non-finite values")
    nbh = Neighborhood(config.connectivity, config.dx, config.dy)
    topo = Topology.from_grid(elev.width, elev.height, nbh)
    if config.fill != "off":
        opts = FillOptions(config.fill, config.fill_epsilon or None)
        elev = priority_flood_fill(elev, topo, opts)
    dtype = np.float32 if config.precision == "single" else np.float64
    elev = Raster(elev.width, elev.height, elev.data.astype(dtype))
    return SimState(elev, topo, routing=config.routing, mfd_exponent=config.mfd_exponent)


def run_simulation(config, strategy: Strategy | None = None, initial: Raster | None = None,
                   debug: bool = False, on_step=None) -> SimulationResult:
    """Run ``config.timesteps`` steps under ``strategy`` (default: the config's).

    ``on_step(k, state)`` is called after each completed step ``k`` (1-based).
    Stops early once the largest per-step elevation change drops below
    ``config.steady_tol * uplift * dt`` when ``steady_tol > 0``.
    """
    config.validate()
    strategy = strategy or Strategy(config.strategy, config.workers)
    check_combination(strategy.kind, config.routing)
    params = config.sim_params()
    state = prepare_state(config, initial)
    timings = PhaseTimings()
    worker_cells, pits = [], []
    newton = 0
    threshold = config.steady_tol * params.uplift * params.dt
    start = time.perf_counter()
    for k in range(1, config.timesteps + 1):
        worker_cells.append(run_step(state, params, strategy, debug))
        timings.add(state.last.timings)
        newton += state.last.newton_iterations
        pits.append(state.last.interior_pits)
        if on_step is not None:
            on_step(k, state)
        if config.steady_tol > 0 and state.last.max_change < threshold:
            break
    wall = time.perf_counter() - start
    out = Raster(state.elev.width, state.elev.height, state.elev.data.astype(np.float64))
    return SimulationResult(out, timings, strategy, state.steps_done, newton,
                            worker_cells, wall, pits)


def all_strategies(workers=(1, 2, 4, 8)) -> list[Strategy]:
    out = [Strategy(k) for k in SERIAL_KINDS]
    for kind in STRATEGY_KINDS:
        if kind not in SERIAL_KINDS:
            out.extend(Strategy(kind, w) for w in workers)
    return out


__all__ = [
    "PHASES",
    "STRATEGY_KINDS",
    "OrderingViolation",
    "PhaseTimings",
    "SimulationResult",
    "Strategy",
    "all_strategies",
    "check_combination",
    "partition_sources",
    "private_plans",
    "run_simulation",
    "run_step",
]
