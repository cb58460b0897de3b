"""Gridded fields on the periodic box and their on-disk formats."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

MAGIC = b"KSLF"
VERSION = 1


@dataclass(frozen=True)
class Grid:
    """Uniform node-centred grid on [-L, L)^dim with n points per axis."""

    dim: int
    n: int
    L: float

    @classmethod
    def from_params(cls, params) -> "Grid":
        return cls(params.dim, params.grid_points, params.box_half_length)

    @property
    def h(self) -> float:
        return 2.0 * self.L / self.n

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.n,) * self.dim

    @cached_property
    def axis(self) -> np.ndarray:
        return -self.L + self.h * np.arange(self.n)

    @cached_property
    def coords(self) -> tuple[np.ndarray, ...]:
        """Broadcastable coordinate arrays, one per axis (sparse meshgrid)."""
        return tuple(np.meshgrid(*[self.axis] * self.dim, indexing="ij", sparse=True))

    @cached_property
    def mesh(self) -> tuple[np.ndarray, ...]:
        return tuple(np.meshgrid(*[self.axis] * self.dim, indexing="ij"))


@dataclass(frozen=True, eq=False)
class ScalarField:
    values: np.ndarray
    grid: Grid

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.shape != self.grid.shape:
            raise ValueError(f"field shape {vals.shape} does not match grid {self.grid.shape}")
        object.__setattr__(self, "values", vals)

    @classmethod
    def full(cls, grid: Grid, value: float) -> "ScalarField":
        return cls(np.full(grid.shape, float(value)), grid)

    @classmethod
    def from_function(cls, grid: Grid, fn) -> "ScalarField":
        return cls(np.broadcast_to(fn(*grid.coords), grid.shape).astype(float), grid)

    def min(self) -> float:
        return float(self.values.min())

    def max(self) -> float:
        return float(self.values.max())

    def norm_inf(self) -> float:
        return float(np.abs(self.values).max())

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.values)))

    def __add__(self, other):
        return ScalarField(self.values + _vals(other), self.grid)

    def __sub__(self, other):
        return ScalarField(self.values - _vals(other), self.grid)

    def __mul__(self, other):
        return ScalarField(self.values * _vals(other), self.grid)

    __rmul__ = __mul__


def _vals(x):
    return x.values if isinstance(x, ScalarField) else x


@dataclass(frozen=True, eq=False)
class VectorField:
    components: tuple[ScalarField, ...]

    def __post_init__(self):
        grids = {c.grid for c in self.components}
        if len(grids) != 1:
            raise ValueError("vector components must share one grid")

    @property
    def grid(self) -> Grid:
        return self.components[0].grid

    def magnitude(self) -> np.ndarray:
        return np.sqrt(sum(c.values ** 2 for c in self.components))

    def norm_inf(self) -> float:
        """Sup over the grid of the Euclidean length."""
        return float(self.magnitude().max())


# ---------------------------------------------------------------------------
# binary layout: magic, version, dim, sizes, spacing, L, then row-major float64
# ---------------------------------------------------------------------------


def write_field(path, field: ScalarField):
    g = field.grid
    header = MAGIC + struct.pack("<II", VERSION, g.dim)
    header += struct.pack(f"<{g.dim}Q", *g.shape)
    header += struct.pack(f"<{g.dim}d", *([g.h] * g.dim))
    header += struct.pack("<d", g.L)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(field.values, dtype="<f8").tobytes())


def read_field(path) -> ScalarField:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not a field file")
    version, dim = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported field version {version}")
    off = 12
    sizes = struct.unpack_from(f"<{dim}Q", data, off)
    off += 8 * dim
    spacing = struct.unpack_from(f"<{dim}d", data, off)
    off += 8 * dim
    (L,) = struct.unpack_from("<d", data, off)
    off += 8
    if len(set(sizes)) != 1:
        raise ValueError("only isotropic grids are supported")
    grid = Grid(dim, sizes[0], L)
    if abs(spacing[0] - grid.h) > 1e-12 * grid.h:
        raise ValueError(f"{path}: spacing inconsistent with box")
    vals = np.frombuffer(data, dtype="<f8", offset=off, count=int(np.prod(sizes))).reshape(sizes)
    return ScalarField(vals.astype(float), grid)


def write_field_csv(path, field: ScalarField, max_points: int = 65536):
    g = field.grid
    if field.values.size > max_points:
        raise ValueError(f"grid too large for CSV ({field.values.size} > {max_points} points)")
    names = ["x", "y"][: g.dim] + ["value"]
    cols = [m.ravel() for m in g.mesh] + [field.values.ravel()]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(names)
        for row in zip(*cols):
            w.writerow([f"{v:.17g}" for v in row])
