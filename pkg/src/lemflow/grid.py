"""Raster storage, cell addressing and neighbour tables.

Cells are stored row-major: cell ``(x, y)`` lives at ``y * width + x``.
Every kernel in the package works on a :class:`Topology`, a dense
``(N, Dmax)`` neighbour table. Regular grids build one with
:meth:`Topology.from_grid`; small hand-made graphs (e.g. textbook examples)
use :meth:`Topology.from_adjacency`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

#: Receiver sentinel for cells that pass no flow. Never a valid cell index.
NOFLOW = np.iinfo(np.int64).max

# Frozen neighbour order. Receiver tie-breaking keeps the first steepest
# neighbour, so changing this order changes simulation output.
_OFFSETS_8 = ((-1, -1), (0, -1), (1, -1), (-1, 0), (1, 0), (-1, 1), (0, 1), (1, 1))
_OFFSETS_4 = ((0, -1), (-1, 0), (1, 0), (0, 1))


class GridError(ValueError):
    """Invalid raster dimensions, connectivity or addressing."""


@dataclass(frozen=True)
class Neighborhood:
    """Fixed, ordered stencil of neighbour offsets.

    Parameters
    ----------
    connectivity : int
        4 or 8. Hexagonal (6) grids are declared but not supported.
    dx, dy : float
        Cell spacing along x and y.
    """

    connectivity: int = 8
    dx: float = 1.0
    dy: float = 1.0
    offsets: tuple[tuple[int, int], ...] = field(init=False)
    distances: tuple[float, ...] = field(init=False)

    def __post_init__(self):
        if self.connectivity == 8:
            offsets = _OFFSETS_8
        elif self.connectivity == 4:
            offsets = _OFFSETS_4
        elif self.connectivity == 6:
            raise GridError("hexagonal (6-connected) grids are not supported")
        else:
            raise GridError(f"connectivity must be 4 or 8, got {self.connectivity!r}")
        if not (self.dx > 0 and self.dy > 0):
            raise GridError("cell spacing must be positive")
        dists = tuple(math.hypot(ox * self.dx, oy * self.dy) for ox, oy in offsets)
        object.__setattr__(self, "offsets", offsets)
        object.__setattr__(self, "distances", dists)

    @property
    def dmax(self) -> int:
        return self.connectivity

    @property
    def cell_area(self) -> float:
        return self.dx * self.dy


@dataclass
class Raster:
    """Row-major 2D scalar field stored as a flat array."""

    width: int
    height: int
    data: np.ndarray

    def __post_init__(self):
        self.width = int(self.width)
        self.height = int(self.height)
        check_dims(self.width, self.height)
        self.data = np.ascontiguousarray(self.data).reshape(-1)
        if self.data.size != self.width * self.height:
            raise GridError(
                f"raster data has {self.data.size} values, expected "
                f"{self.width}x{self.height}={self.width * self.height}"
            )

    @property
    def size(self) -> int:
        return self.width * self.height

    def as_2d(self) -> np.ndarray:
        """View of the data with shape ``(height, width)``."""
        return self.data.reshape(self.height, self.width)

    def copy(self) -> "Raster":
        return Raster(self.width, self.height, self.data.copy())

    def __eq__(self, other):
        if not isinstance(other, Raster):
            return NotImplemented
        return (
            self.width == other.width
            and self.height == other.height
            and self.data.dtype == other.data.dtype
            and self.data.tobytes() == other.data.tobytes()
        )


def check_dims(width: int, height: int) -> None:
    if width < 3 or height < 3:
        raise GridError(f"raster must be at least 3x3, got {width}x{height}")


def index_of(x: int, y: int, width: int) -> int:
    assert 0 <= x < width and y >= 0, f"cell ({x}, {y}) outside width {width}"
    return y * width + x


def coords_of(c: int, width: int) -> tuple[int, int]:
    return c % width, c // width


def is_perimeter(c: int, width: int, height: int) -> bool:
    x, y = c % width, c // width
    return x == 0 or y == 0 or x == width - 1 or y == height - 1


def neighbors(c: int, width: int, height: int, nbh: Neighborhood) -> list[tuple[int, float]]:
    """In-bounds neighbours of ``c`` in the stencil's fixed order."""
    x, y = c % width, c // width
    out = []
    for (ox, oy), d in zip(nbh.offsets, nbh.distances):
        nx, ny = x + ox, y + oy
        if 0 <= nx < width and 0 <= ny < height:
            out.append((ny * width + nx, d))
    return out


def perimeter_mask(width: int, height: int) -> np.ndarray:
    mask = np.zeros((height, width), dtype=np.bool_)
    mask[0, :] = mask[-1, :] = True
    mask[:, 0] = mask[:, -1] = True
    return mask.reshape(-1)


@dataclass(frozen=True)
class Topology:
    """Dense neighbour table shared by all flow kernels.

    Attributes
    ----------
    nbr : (N, Dmax) int64
        Neighbour indices in stencil order; missing slots hold -1.
    ndist : (N, Dmax) float64
        Distance to each neighbour (unused slots hold +inf).
    boundary : (N,) bool
        Fixed base-level cells. They never route flow, uplift or erode.
    """

    nbr: np.ndarray
    ndist: np.ndarray
    boundary: np.ndarray
    width: int | None = None
    height: int | None = None
    cell_area: float = 1.0

    @property
    def size(self) -> int:
        return self.nbr.shape[0]

    @property
    def dmax(self) -> int:
        return self.nbr.shape[1]

    @classmethod
    def from_grid(cls, width: int, height: int, nbh: Neighborhood | None = None) -> "Topology":
        nbh = nbh or Neighborhood()
        check_dims(width, height)
        ys, xs = np.divmod(np.arange(width * height, dtype=np.int64), width)
        d = nbh.dmax
        nbr = np.full((width * height, d), -1, dtype=np.int64)
        ndist = np.full((width * height, d), np.inf)
        for k, ((ox, oy), dist) in enumerate(zip(nbh.offsets, nbh.distances)):
            nx, ny = xs + ox, ys + oy
            ok = (nx >= 0) & (nx < width) & (ny >= 0) & (ny < height)
            nbr[ok, k] = ny[ok] * width + nx[ok]
            ndist[ok, k] = dist
        return cls(nbr, ndist, perimeter_mask(width, height), width, height, nbh.cell_area)

    @classmethod
    def from_adjacency(cls, adjacency, distances, boundary, cell_area: float = 1.0) -> "Topology":
        """Build a topology for an arbitrary graph.

        ``adjacency[c]`` lists the neighbours of ``c`` in scan order and
        ``distances[c]`` the matching edge lengths. Neighbour relations must
        be symmetric.
        """
        n = len(adjacency)
        d = max((len(a) for a in adjacency), default=1) or 1
        nbr = np.full((n, d), -1, dtype=np.int64)
        ndist = np.full((n, d), np.inf)
        for c, (adj, dist) in enumerate(zip(adjacency, distances)):
            if len(adj) != len(dist):
                raise GridError(f"cell {c}: {len(adj)} neighbours but {len(dist)} distances")
            nbr[c, : len(adj)] = adj
            ndist[c, : len(adj)] = dist
        for c in range(n):
            for m in nbr[c]:
                if m >= 0 and c not in nbr[m]:
                    raise GridError(f"adjacency is not symmetric between {c} and {m}")
        mask = np.zeros(n, dtype=np.bool_)
        mask[list(boundary)] = True
        return cls(nbr, ndist, mask, None, None, cell_area)
