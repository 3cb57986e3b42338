"""
Gaussian kernel density estimate on a uniform cell-centred grid, and the
discretised L2 loss against a target density.

The kernel uses the standard form exp(-1/2 x^T H^-1 x) / (2 pi sqrt|H|) with a
diagonal H = diag(h1^2, h2^2). Because the kernel factorises per axis, a grid
evaluation is a single (nx1 x n) @ (n x nx2) product.
"""

import logging
import math
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from diffengine import value_of

logger = logging.getLogger(__name__)

DEFAULT_GRID_CELLS = 64
SILVERMAN_FACTOR = 1.06


@lru_cache(maxsize=None)
def _note(message: str) -> None:
    logger.info(message)


@dataclass(frozen=True)
class Bandwidth:
    """Per-axis kernel widths; H^(1/2) = diag(h1, h2)."""

    h1: float
    h2: float

    def __post_init__(self):
        if not (self.h1 > 0 and self.h2 > 0):
            raise ValueError(f"bandwidths must be positive, got ({self.h1}, {self.h2})")

    @property
    def matrix(self) -> np.ndarray:
        return np.diag([self.h1 ** 2, self.h2 ** 2])


@dataclass(frozen=True, eq=False)
class DensityGrid:
    """Scalar field on nx1 x nx2 cells; values[i, j] sits at the centre of cell (i, j)."""

    x1_min: float
    x1_max: float
    x2_min: float
    x2_max: float
    nx1: int
    nx2: int
    values: np.ndarray

    def __post_init__(self):
        if not (self.x1_min < self.x1_max and self.x2_min < self.x2_max):
            raise ValueError(
                f"grid bounds must be ordered, got [{self.x1_min}, {self.x1_max}] x [{self.x2_min}, {self.x2_max}]"
            )
        if self.nx1 < 1 or self.nx2 < 1:
            raise ValueError(f"grid needs at least one cell per axis, got {self.nx1} x {self.nx2}")
        values = np.asarray(self.values, dtype=float)
        if values.shape != (self.nx1, self.nx2):
            raise ValueError(f"values shape {values.shape} does not match grid {self.nx1} x {self.nx2}")
        if not np.all(np.isfinite(values)):
            raise ValueError("grid values must be finite")
        object.__setattr__(self, "values", values)

    @classmethod
    def empty(cls, bounds: Sequence[float], nx1: int, nx2: Optional[int] = None) -> "DensityGrid":
        nx2 = nx1 if nx2 is None else nx2
        x1_min, x1_max, x2_min, x2_max = (float(b) for b in bounds)
        return cls(x1_min, x1_max, x2_min, x2_max, int(nx1), int(nx2), np.zeros((int(nx1), int(nx2))))

    @property
    def bounds(self) -> Tuple[float, float, float, float]:
        return (self.x1_min, self.x1_max, self.x2_min, self.x2_max)

    @property
    def dx1(self) -> float:
        return (self.x1_max - self.x1_min) / self.nx1

    @property
    def dx2(self) -> float:
        return (self.x2_max - self.x2_min) / self.nx2

    @property
    def cell_area(self) -> float:
        return self.dx1 * self.dx2

    def centers(self) -> Tuple[np.ndarray, np.ndarray]:
        c1 = self.x1_min + (np.arange(self.nx1) + 0.5) * self.dx1
        c2 = self.x2_min + (np.arange(self.nx2) + 0.5) * self.dx2
        return c1, c2

    def mesh(self) -> np.ndarray:
        """Cell centres as (nx1*nx2, 2), row-major (x1 index outer)."""
        c1, c2 = self.centers()
        g1, g2 = np.meshgrid(c1, c2, indexing="ij")
        return np.stack([g1.reshape(-1), g2.reshape(-1)], axis=1)

    def like(self, values) -> "DensityGrid":
        return DensityGrid(*self.bounds, self.nx1, self.nx2, np.asarray(values, dtype=float).reshape(self.nx1, self.nx2))

    def same_geometry(self, other: "DensityGrid") -> bool:
        return self.bounds == other.bounds and (self.nx1, self.nx2) == (other.nx1, other.nx2)

    def mass(self) -> float:
        return float(self.values.sum() * self.cell_area)

    def to_frame(self) -> pd.DataFrame:
        mesh = self.mesh()
        return pd.DataFrame({"x1": mesh[:, 0], "x2": mesh[:, 1], "value": self.values.reshape(-1)})


def silverman_bandwidth(sigma: Union[float, Sequence[float]], n: int) -> Bandwidth:
    """h_i = 1.06 sigma_i n^(-1/5) per axis."""
    s1, s2 = (sigma, sigma) if np.isscalar(sigma) else tuple(sigma)
    if not (s1 > 0 and s2 > 0):
        raise ValueError(f"target standard deviation must be positive, got {sigma}")
    if n < 1:
        raise ValueError(f"particle count must be positive, got {n}")
    factor = SILVERMAN_FACTOR * float(n) ** -0.2
    return Bandwidth(factor * float(s1), factor * float(s2))


def kde_values(points, bw: Bandwidth, grid: DensityGrid):
    """KDE at the grid cell centres as an (nx1, nx2) array, traced when ``points`` is.

    ``points`` is (n, 2); arrays, tape values and duals are accepted.
    """
    _note("KDE kernel uses exp(-x^T H^-1 x / 2) with H = diag(h^2); prefactor 1/n (not 1/h)")
    n = value_of(points).shape[0]
    if n < 1:
        raise ValueError("KDE needs at least one point")
    c1, c2 = grid.centers()
    u1 = (c1[:, None] - points[:, 0][None, :]) / bw.h1
    u2 = (c2[:, None] - points[:, 1][None, :]) / bw.h2
    a = np.exp(-0.5 * (u1 * u1))
    b = np.exp(-0.5 * (u2 * u2))
    return (a @ b.T) / (n * 2.0 * math.pi * bw.h1 * bw.h2)


def kde_evaluate(points, bw: Bandwidth, grid: DensityGrid) -> DensityGrid:
    points = np.asarray(points, dtype=float).reshape(-1, 2)
    return grid.like(kde_values(points, bw, grid))


def l2_density_loss(estimate: DensityGrid, target: DensityGrid, riemann: bool = False) -> float:
    """Sum of squared cell differences (times the cell area when ``riemann``)."""
    if not estimate.same_geometry(target):
        raise ValueError("estimate and target grids have different geometry")
    total = float(np.sum((estimate.values - target.values) ** 2))
    return total * estimate.cell_area if riemann else total


def grid_mse(estimate: DensityGrid, target: DensityGrid) -> float:
    """Mean squared cell difference."""
    return l2_density_loss(estimate, target) / (estimate.nx1 * estimate.nx2)


def gaussian_target(mean: Sequence[float], sigma: float, grid: DensityGrid) -> DensityGrid:
    """N(mean, sigma^2 I) density at the cell centres."""
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    c1, c2 = grid.centers()
    g1 = np.exp(-0.5 * ((c1 - mean[0]) / sigma) ** 2)
    g2 = np.exp(-0.5 * ((c2 - mean[1]) / sigma) ** 2)
    return grid.like(np.outer(g1, g2) / (2.0 * math.pi * sigma * sigma))


def uniform_positions(n: int, bounds: Sequence[float]) -> np.ndarray:
    """n points on a cell-centred lattice filling the box as evenly as possible."""
    if n < 1:
        raise ValueError(f"particle count must be positive, got {n}")
    x1_min, x1_max, x2_min, x2_max = bounds
    aspect = (x1_max - x1_min) / (x2_max - x2_min)
    cols = max(1, int(round(math.sqrt(n * aspect))))
    rows = int(math.ceil(n / cols))
    p2 = x2_min + (np.arange(rows) + 0.5) * (x2_max - x2_min) / rows
    # rows hold n // rows or n // rows + 1 points, each row spread over the full width
    counts = [len(chunk) for chunk in np.array_split(np.arange(n), rows)]
    points = []
    for y, k in zip(p2, counts):
        p1 = x1_min + (np.arange(k) + 0.5) * (x1_max - x1_min) / k
        points.append(np.stack([p1, np.full(k, y)], axis=1))
    return np.concatenate(points, axis=0)


def save_grid_csv(grid: DensityGrid, path) -> None:
    grid.to_frame().to_csv(path, index=False)


def save_grid_pgm(grid: DensityGrid, path) -> None:
    """ASCII P2 heatmap, linearly scaled to 0-255; the comment records min and max.

    Rows run from high x2 (top) to low x2 so the image reads like a plot.
    """
    lo = float(grid.values.min())
    hi = float(grid.values.max())
    span = hi - lo
    scaled = np.zeros_like(grid.values) if span == 0 else (grid.values - lo) / span * 255.0
    pixels = np.rint(scaled).astype(int).T[::-1]
    lines = ["P2", f"# min={lo!r} max={hi!r}", f"{grid.nx1} {grid.nx2}", "255"]
    lines.extend(" ".join(str(v) for v in row) for row in pixels)
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")
