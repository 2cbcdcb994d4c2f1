"""Command-line entry point: ``lemflow run | compare | bench``.

Exit codes: 0 success (or identical outputs), 1 usage error, 2 runtime
error, 3 outputs differ.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .scheduler import STRATEGY_KINDS, SimulationResult, Strategy, all_strategies, run_simulation
from .terrain_io import RunConfig, export_text, load_config, write_raster

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_MISMATCH = 0, 1, 2, 3

BENCH_COLUMNS = ("strategy", "workers", "width", "height", "phase", "steps",
                 "total_s", "mean_step_s", "share_pct")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="FILE", help="key=value config file")
    for f in fields(RunConfig):
        names = [f"--{f.name}"]
        if "_" in f.name:
            names.append(f"--{f.name.replace('_', '-')}")
        p.add_argument(*names, dest=f"cfg_{f.name}", metavar=f.name.upper(), default=None)


def _config_from(args) -> RunConfig:
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    return load_config(args.config, overrides)


def parse_strategies(text: str, default_workers: int) -> list[Strategy]:
    """``all`` or a comma list of ``kind`` / ``kind@workers``."""
    if text.strip() == "all":
        return all_strategies()
    out = []
    for token in filter(None, (t.strip() for t in text.split(","))):
        kind, _, workers = token.partition("@")
        if kind not in STRATEGY_KINDS:
            raise UsageError(f"unknown strategy {kind!r}; choose from {', '.join(STRATEGY_KINDS)}")
        try:
            out.append(Strategy(kind, int(workers) if workers else default_workers))
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    return out


def _parse_sizes(text: str) -> list[tuple[int, int]]:
    sizes = []
    for token in filter(None, (t.strip() for t in text.split(","))):
        w, _, h = token.lower().partition("x")
        try:
            sizes.append((int(w), int(h or w)))
        except ValueError:
            raise UsageError(f"bad size {token!r}; use N or WxH") from None
    if not sizes:
        raise UsageError("no sizes given")
    return sizes


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lemflow", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", help="run one simulation and write the final raster")
    _add_config_flags(run)
    run.add_argument("--text-export", metavar="PATH", help="also write a plain-text copy")

    cmp_ = sub.add_parser("compare", help="run several strategies and diff their outputs")
    _add_config_flags(cmp_)
    cmp_.add_argument("--strategies", default="all", help="'all' or kind[@workers],...")
    cmp_.add_argument("--inject-perturbation", type=int, metavar="CELL", default=None,
                      help=argparse.SUPPRESS)

    bench = sub.add_parser("bench", help="per-phase timings for strategies and sizes")
    _add_config_flags(bench)
    bench.add_argument("--sizes", default="100,200", help="comma list of N or WxH")
    bench.add_argument("--strategies", default="rb_serial,rb_par_all")
    bench.add_argument("--json", metavar="PATH", help="write the full report as JSON")
    bench.add_argument("--tsv", metavar="PATH", help="write the table here instead of stdout")
    bench.add_argument("--no-warmup", action="store_true", help="include JIT compilation in timings")
    return parser


# --------------------------------------------------------------------------
# run

def snapshot_path(output: str, step: int) -> str:
    base = output[:-4] if output.endswith(".lem") else output
    return f"{base}.{step:06d}.lem"


def _print_phases(result: SimulationResult, out=None) -> None:
    out = out or sys.stdout
    totals = result.timings.totals()
    grand = sum(totals.values()) or 1.0
    print(f"{result.strategy.label}: {result.steps} steps in {result.wall_time:.3f} s, "
          f"{result.newton_iterations} Newton iterations", file=out)
    for phase, t in totals.items():
        print(f"  {phase:<18}{t:10.4f} s {100 * t / grand:6.1f}%", file=out)


def cmd_run(args) -> int:
    cfg = _config_from(args)

    def snapshot(k, state):
        if cfg.snapshot_interval and k % cfg.snapshot_interval == 0:
            from .grid import Raster

            data = state.elev.data.astype(np.float64)
            write_raster(Raster(state.elev.width, state.elev.height, data), snapshot_path(cfg.output, k))

    result = run_simulation(cfg, on_step=snapshot)
    write_raster(result.raster, cfg.output)
    if args.text_export:
        export_text(result.raster, args.text_export)
    _print_phases(result)
    print(f"wrote {cfg.output}")
    return EXIT_OK


# --------------------------------------------------------------------------
# compare

def first_difference(a: np.ndarray, b: np.ndarray) -> int | None:
    """Index of the first cell whose bytes differ, or None."""
    diff = np.flatnonzero(a.view(np.uint64) != b.view(np.uint64))
    return int(diff[0]) if diff.size else None


def _perturb(data: np.ndarray, cell: int) -> None:
    bumped = data[cell] + 1e-12
    if bumped == data[cell]:
        bumped = np.nextafter(data[cell], np.inf)
    data[cell] = bumped


def cmd_compare(args) -> int:
    cfg = _config_from(args)
    strategies = parse_strategies(args.strategies, cfg.workers)
    if len(strategies) < 2:
        raise UsageError("compare needs at least two strategies")
    results = [run_simulation(cfg, s) for s in strategies]
    if args.inject_perturbation is not None:
        if not 0 <= args.inject_perturbation < results[-1].raster.size:
            raise UsageError("perturbation cell out of range")
        _perturb(results[-1].raster.data, args.inject_perturbation)
    ref = results[0]
    status = EXIT_OK
    for res in results:
        cell = first_difference(ref.raster.data, res.raster.data)
        if cell is None:
            print(f"{res.strategy.label:<24} identical  ({res.wall_time:.3f} s)")
            continue
        status = EXIT_MISMATCH
        x, y = cell % ref.raster.width, cell // ref.raster.width
        print(f"{res.strategy.label:<24} DIFFERS at cell {cell} (x={x}, y={y}): "
              f"{float(ref.raster.data[cell])!r} vs {float(res.raster.data[cell])!r}")
    print("all outputs identical" if status == EXIT_OK else "outputs differ")
    return status


# --------------------------------------------------------------------------
# bench

@dataclass
class BenchReport:
    rows: list[dict] = field(default_factory=list)
    runs: list[dict] = field(default_factory=list)

    def add(self, result: SimulationResult, width: int, height: int) -> None:
        totals = result.timings.totals()
        grand = sum(totals.values())
        steps = max(result.steps, 1)
        base = dict(strategy=result.strategy.kind, workers=result.strategy.workers,
                    width=width, height=height, steps=result.steps)
        for phase, t in list(totals.items()) + [("total", grand)]:
            self.rows.append(dict(base, phase=phase, total_s=t, mean_step_s=t / steps,
                                  share_pct=100.0 * t / grand if grand > 0 else 0.0))
        self.runs.append(dict(base, wall_s=result.wall_time, per_step=result.timings.steps,
                              worker_cells=result.worker_cells,
                              newton_iterations=result.newton_iterations))

    def to_tsv(self) -> str:
        lines = ["\t".join(BENCH_COLUMNS)]
        for row in self.rows:
            cells = []
            for col in BENCH_COLUMNS:
                v = row[col]
                cells.append(f"{v:.6f}" if isinstance(v, float) else str(v))
            lines.append("\t".join(cells))
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps({"columns": list(BENCH_COLUMNS), "rows": self.rows, "runs": self.runs}, indent=1)


def run_bench(cfg: RunConfig, sizes, strategies, warmup: bool = True) -> BenchReport:
    report = BenchReport()
    if warmup:
        small = cfg.replace(width=8, height=8, timesteps=1)
        for s in strategies:
            run_simulation(small, s)
    for width, height in sizes:
        sized = cfg.replace(width=width, height=height)
        for s in strategies:
            report.add(run_simulation(sized, s), width, height)
    return report


def cmd_bench(args) -> int:
    cfg = _config_from(args)
    strategies = parse_strategies(args.strategies, cfg.workers)
    report = run_bench(cfg, _parse_sizes(args.sizes), strategies, not args.no_warmup)
    table = report.to_tsv()
    if args.tsv:
        Path(args.tsv).write_text(table)
    else:
        sys.stdout.write(table)
    if args.json:
        Path(args.json).write_text(report.to_json())
    return EXIT_OK


COMMANDS = {"run": cmd_run, "compare": cmd_compare, "bench": cmd_bench}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"lemflow: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        # config range/type errors surface as ValueError subclasses
        print(f"lemflow: error: {exc}", file=sys.stderr)
        return EXIT_USAGE if exc.__class__.__name__ == "ConfigError" else EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - any module error is a runtime failure
        print(f"lemflow: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
