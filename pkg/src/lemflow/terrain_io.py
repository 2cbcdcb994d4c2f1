"""Seeded terrain generation, raster files and run configuration.

Terrain values come from SplitMix64 in counter mode: cell ``i`` of a run
with seed ``s`` is ``mix(s + (i + 1) * 0x9E3779B97F4A7C15)`` with the
standard SplitMix64 finaliser, and the top 53 bits give a double in
``[0, 1)``. The value depends only on ``(seed, i)``, so any port that
implements SplitMix64 reproduces the same terrain bit for bit.

Raster files are a text header line ``LEM1 <width> <height>`` followed by
the row-major values as little-endian float64.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .depressions import FILL_MODES
from .erosion import SimParams
from .grid import Raster

MAGIC = b"LEM1"
_MAX_CELLS = 1 << 36
_MASK64 = (1 << 64) - 1

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


def splitmix64(counter: np.ndarray, seed: int) -> np.ndarray:
    """SplitMix64 output for state ``seed + (counter + 1) * golden`` (uint64 wraparound)."""
    z = np.uint64(seed & _MASK64) + (counter.astype(np.uint64) + np.uint64(1)) * _GOLDEN
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def generate_terrain(width: int, height: int, seed: int) -> Raster:
    """Uniform ``[0, 1)`` elevations, one independent draw per cell."""
    n = int(width) * int(height)
    bits = splitmix64(np.arange(n, dtype=np.uint64), int(seed))
    data = (bits >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
    return Raster(width, height, data)


# --------------------------------------------------------------------------
# raster files

class RasterFileError(ValueError):
    """Base class for unreadable raster files."""


class HeaderError(RasterFileError):
    pass


class DimensionError(RasterFileError):
    pass


class TruncatedPayloadError(RasterFileError):
    pass


def write_raster(r: Raster, path) -> None:
    payload = np.asarray(r.data, dtype="<f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(b"%s %d %d\n" % (MAGIC, r.width, r.height))
        fh.write(payload)


def read_raster(path) -> Raster:
    with open(path, "rb") as fh:
        header = fh.readline(128)
        payload = fh.read()
    if not header.endswith(b"\n"):
        raise HeaderError(f"{path}: missing or overlong header line")
    parts = header.split()
    if len(parts) != 3 or parts[0] != MAGIC:
        raise HeaderError(f"{path}: expected 'LEM1 <width> <height>', got {header[:40]!r}")
    try:
        width, height = int(parts[1]), int(parts[2])
    except ValueError:
        raise HeaderError(f"{path}: non-integer dimensions in header") from None
    if width < 3 or height < 3 or width * height > _MAX_CELLS:
        raise DimensionError(f"{path}: unsupported dimensions {width}x{height}")
    expected = width * height * 8
    if len(payload) < expected:
        raise TruncatedPayloadError(
            f"{path}: payload has {len(payload)} bytes, expected {expected} for {width}x{height}"
        )
    if len(payload) > expected:
        raise RasterFileError(f"{path}: {len(payload) - expected} trailing bytes after payload")
    data = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    return Raster(width, height, data)


def export_text(r: Raster, path) -> None:
    """Plain-text copy for plotting tools: one raster row per line."""
    np.savetxt(path, np.asarray(r.as_2d(), dtype=np.float64), fmt="%.17g")


# --------------------------------------------------------------------------
# run configuration

class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass
class RunConfig:
    width: int = 500
    height: int = 500
    seed: int = 0
    timesteps: int = 120
    strategy: str = "rb_serial"
    workers: int = 1
    K: float = 2e-6
    m_exp: float = 0.5
    n_exp: float = 1.0
    uplift: float = 2e-3
    dt: float = 1000.0
    epsilon: float = 1e-6
    dx: float = 1.0
    dy: float = 1.0
    max_iter: int = 100
    fill: str = "off"
    fill_epsilon: float = 0.0  # 0 picks a data-derived increment
    connectivity: int = 8
    routing: str = "d8"
    mfd_exponent: float = 1.0
    precision: str = "double"
    output: str = "out.lem"
    snapshot_interval: int = 0
    steady_tol: float = 0.0  # stop once max |dh| per step < steady_tol * uplift * dt

    def sim_params(self) -> SimParams:
        return SimParams(self.K, self.m_exp, self.n_exp, self.uplift, self.dt,
                         self.epsilon, self.dx, self.dy, self.max_iter)

    def replace(self, **changes) -> "RunConfig":
        cfg = dataclasses.replace(self, **changes)
        cfg.validate()
        return cfg

    def validate(self) -> "RunConfig":
        from .scheduler import STRATEGY_KINDS, check_combination

        at_least = {"width": 3, "height": 3, "timesteps": 0, "workers": 1, "max_iter": 1,
                    "snapshot_interval": 0}
        for key, lo in at_least.items():
            if getattr(self, key) < lo:
                raise ConfigError(key, f"must be >= {lo}, got {getattr(self, key)}")
        for key in ("n_exp", "dt", "epsilon", "dx", "dy"):
            if not getattr(self, key) > 0:
                raise ConfigError(key, f"must be > 0, got {getattr(self, key)}")
        for key in ("K", "fill_epsilon", "steady_tol", "mfd_exponent"):
            if not getattr(self, key) >= 0:
                raise ConfigError(key, f"must be >= 0, got {getattr(self, key)}")
        choices = {
            "strategy": STRATEGY_KINDS,
            "fill": FILL_MODES,
            "routing": ("d8", "mfd"),
            "precision": ("double", "single"),
            "connectivity": (4, 8),
        }
        for key, allowed in choices.items():
            if getattr(self, key) not in allowed:
                raise ConfigError(key, f"must be one of {list(allowed)}, got {getattr(self, key)!r}")
        try:
            check_combination(self.strategy, self.routing)
        except ValueError as exc:
            raise ConfigError("strategy", str(exc)) from None
        return self

    def to_text(self) -> str:
        return "".join(f"{f.name}={getattr(self, f.name)}\n" for f in fields(self))


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key: str, raw):
    kind = _FIELD_TYPES[key]
    if not isinstance(raw, str):
        raw = str(raw)
    raw = raw.strip()
    try:
        if kind == "int":
            return int(raw, 0)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(key, f"expected {kind}, got {raw!r}") from None
    return raw


def parse_pairs(text: str) -> dict[str, str]:
    """``key=value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        for token in line.split():
            if "=" not in token:
                raise ConfigError(token, f"line {lineno}: expected key=value")
            key, value = token.split("=", 1)
            out[key.strip()] = value
    return out


def parse_config(text: str | None = None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then ``text`` (config file contents), then ``overrides`` (flags)."""
    values = {}
    for source in (parse_pairs(text or ""), overrides or {}):
        for key, raw in source.items():
            if raw is None:
                continue
            if key not in _FIELD_TYPES:
                raise ConfigError(key, "unknown key")
            values[key] = _coerce(key, raw)
    return RunConfig(**values).validate()


def load_config(path: str | os.PathLike | None, overrides: dict | None = None) -> RunConfig:
    text = Path(path).read_text() if path else None
    return parse_config(text, overrides)
