"""Uniform rectangular grids and the scalar/vector fields living on them.

Geometry convention used throughout: the domain is [0, lx) x [0, ly] with
samples at the nodes x_i = i*dx (periodic in x) and y_j = j*dy.  The channel
walls sit at y = 0 (on the first row) and y = ly (one spacing above the last
row).  Arrays are indexed values[i, j] with axis 0 = x and axis 1 = y, which
matches the row-major (x index, y index) layout of the SWF1 file format.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class RefinementMismatch(ValueError):
    """Two grids are not an integer nested refinement of each other."""


@dataclass(frozen=True)
class Grid:
    nx: int
    ny: int
    lx: float = 1.0
    ly: float = 1.0

    def __post_init__(self):
        if self.nx < 4 or self.ny < 4:
            raise ValueError(f"grid must be at least 4x4, got {self.nx}x{self.ny}")
        if self.lx <= 0 or self.ly <= 0:
            raise ValueError("domain lengths must be positive")

    @property
    def dx(self) -> float:
        return self.lx / self.nx

    @property
    def dy(self) -> float:
        return self.ly / self.ny

    @property
    def shape(self) -> tuple[int, int]:
        return (self.nx, self.ny)

    @property
    def size(self) -> int:
        return self.nx * self.ny

    def x(self) -> np.ndarray:
        return np.arange(self.nx) * self.dx

    def y(self) -> np.ndarray:
        return np.arange(self.ny) * self.dy

    def mesh(self) -> tuple[np.ndarray, np.ndarray]:
        return np.meshgrid(self.x(), self.y(), indexing="ij")

    def refinement_ratio(self, coarse: "Grid") -> tuple[int, int]:
        """Integer (rx, ry) such that self is an rx/ry-fold refinement of coarse."""
        if self.lx != coarse.lx or self.ly != coarse.ly:
            raise RefinementMismatch("grids cover different domains")
        if self.nx % coarse.nx or self.ny % coarse.ny:
            raise RefinementMismatch(
                f"{self.nx}x{self.ny} is not an integer refinement of "
                f"{coarse.nx}x{coarse.ny}"
            )
        return self.nx // coarse.nx, self.ny // coarse.ny


@dataclass
class ScalarField:
    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != self.grid.shape:
            raise ValueError(
                f"values shape {self.values.shape} does not match grid {self.grid.shape}"
            )

    @classmethod
    def zeros(cls, grid: Grid) -> "ScalarField":
        return cls(grid, np.zeros(grid.shape))

    @classmethod
    def full(cls, grid: Grid, value: float) -> "ScalarField":
        return cls(grid, np.full(grid.shape, float(value)))

    @classmethod
    def from_function(cls, grid: Grid, fn) -> "ScalarField":
        xx, yy = grid.mesh()
        return cls(grid, np.asarray(fn(xx, yy), dtype=np.float64))

    def copy(self) -> "ScalarField":
        return ScalarField(self.grid, self.values.copy())

    def mean(self) -> float:
        return float(self.values.mean())

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.values).all())

    def l2(self) -> float:
        return float(np.sqrt(np.sum(self.values**2)))


@dataclass
class VectorField:
    u: ScalarField
    v: ScalarField
    grid: Grid = field(init=False)

    def __post_init__(self):
        if self.u.grid != self.v.grid:
            raise ValueError("u and v components live on different grids")
        self.grid = self.u.grid

    @classmethod
    def zeros(cls, grid: Grid) -> "VectorField":
        return cls(ScalarField.zeros(grid), ScalarField.zeros(grid))

    def copy(self) -> "VectorField":
        return VectorField(self.u.copy(), self.v.copy())

    def is_finite(self) -> bool:
        return self.u.is_finite() and self.v.is_finite()

    def max_speed(self) -> float:
        return float(max(np.abs(self.u.values).max(), np.abs(self.v.values).max()))
