"""
fields.py – Kernels and Gaussian random field sampling on 1D grids.

Input functions v for every benchmark problem are draws from a mean-zero
Gaussian random field with unit variance, evaluated at m equispaced
sensors on [0, 1] (m = 100 by default).

Kernels
-------
  RBF               exp(-r² / (2 l²))
  EXP_SINE_SQUARED  exp(-2 sin²(π r / p) / l²)
  MATERN15          (1 + √3 r / l) · exp(-√3 r / l)

Usage
-----
    spec    = GaussianFieldSpec(kernel=KernelKind.RBF, length_scale=0.5)
    samples = sample_grf(spec, sensor_grid(), n=10, seed=0)
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.spatial.distance import cdist

from .errors import DimensionMismatch
from .nd_core import cholesky_psd
from .types import GaussianFieldSpec, KernelKind

logger = logging.getLogger(__name__)

SENSOR_COUNT = 100

_SQRT3 = np.sqrt(3.0)


# ---------------------------------------------------------------------------
# Sampled functions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FunctionSample:
    """Values of one input function at its sensor locations."""
    grid:   NDArray[np.float64]
    values: NDArray[np.float64]

    def __post_init__(self) -> None:
        grid   = np.asarray(self.grid, dtype=np.float64)
        values = np.asarray(self.values, dtype=np.float64)
        if grid.ndim != 1 or grid.shape != values.shape:
            raise DimensionMismatch(grid.shape, values.shape, "function sample values")
        if grid.size >= 2 and np.any(np.diff(grid) <= 0):
            raise ValueError("sensor grid must be strictly increasing")
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "values", values)

    @property
    def m(self) -> int:
        return int(self.grid.size)


def sensor_grid(m: int = SENSOR_COUNT, lo: float = 0.0, hi: float = 1.0) -> NDArray[np.float64]:
    if m < 2:
        raise ValueError(f"a sensor grid needs at least 2 points, got {m}")
    return np.linspace(lo, hi, m)


# ---------------------------------------------------------------------------
# Kernels
# ---------------------------------------------------------------------------

def kernel_from_distance(
    kind: KernelKind,
    r: NDArray[np.float64],
    length_scale: float,
    periodicity: float = 1.0,
    variance: float = 1.0,
) -> NDArray[np.float64]:
    """Stationary kernel as a function of distance ``r`` (any shape)."""
    if kind is KernelKind.RBF:
        k = np.exp(-0.5 * (r / length_scale) ** 2)
    elif kind is KernelKind.EXP_SINE_SQUARED:
        k = np.exp(-2.0 * np.sin(np.pi * r / periodicity) ** 2 / length_scale ** 2)
    elif kind is KernelKind.MATERN15:
        z = _SQRT3 * r / length_scale
        k = (1.0 + z) * np.exp(-z)
    else:
        raise ValueError(f"unknown kernel {kind!r}")
    return variance * k


def kernel_eval(spec: GaussianFieldSpec, x1: float, x2: float) -> float:
    r = np.abs(np.float64(x1) - np.float64(x2))
    return float(kernel_from_distance(spec.kernel, r, spec.length_scale, spec.periodicity,
                                      spec.variance))


def kernel_matrix(spec: GaussianFieldSpec, xa: ArrayLike, xb: ArrayLike) -> NDArray[np.float64]:
    a = np.asarray(xa, dtype=np.float64).reshape(-1, 1)
    b = np.asarray(xb, dtype=np.float64).reshape(-1, 1)
    return kernel_from_distance(spec.kernel, cdist(a, b), spec.length_scale, spec.periodicity,
                                spec.variance)


def gram_matrix(spec: GaussianFieldSpec, grid: ArrayLike) -> NDArray[np.float64]:
    k = kernel_matrix(spec, grid, grid)
    return 0.5 * (k + k.T)


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------

def _periodic_classes(
    spec: GaussianFieldSpec, grid: NDArray[np.float64]
) -> tuple[NDArray[np.float64], NDArray[np.intp]]:
    """
    Representatives of grid points modulo the period, and the class of each point.

    Points one period apart have identical kernel rows; sampling on the
    representatives keeps the Gram matrix non-singular and makes the
    sample exactly periodic.
    """
    if spec.kernel is not KernelKind.EXP_SINE_SQUARED:
        return grid, np.arange(grid.size)
    phase   = np.mod(grid, spec.periodicity)
    phase   = np.where(np.isclose(phase, spec.periodicity, rtol=0, atol=1e-12), 0.0, phase)
    keys    = np.round(phase / spec.periodicity, 10)
    _, first, inverse = np.unique(keys, return_index=True, return_inverse=True)
    return grid[first], inverse


def sample_values(
    spec: GaussianFieldSpec,
    grid: ArrayLike,
    n: int,
    rng: np.random.Generator,
) -> NDArray[np.float64]:
    """``n`` draws as an (n, len(grid)) array: rows are L·z with L the jittered Cholesky factor."""
    pts = np.asarray(grid, dtype=np.float64)
    if pts.ndim != 1 or pts.size < 2:
        raise DimensionMismatch("1D grid with >= 2 points", pts.shape, "sampling grid")
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    reps, classes = _periodic_classes(spec, pts)
    chol, _ = cholesky_psd(gram_matrix(spec, reps), jitter=1e-12)
    z = rng.standard_normal((reps.size, n))
    return (chol @ z).T[:, classes]


def sample_grf(
    spec: GaussianFieldSpec,
    grid: Optional[ArrayLike] = None,
    n: int = 1,
    seed: int = 0,
) -> list[FunctionSample]:
    """Draw ``n`` input functions; identical ``seed`` gives identical samples."""
    pts    = sensor_grid() if grid is None else np.asarray(grid, dtype=np.float64)
    values = sample_values(spec, pts, n, np.random.default_rng(seed))
    logger.debug("Sampled %d %s functions (l=%g) on %d points", n, spec.kernel.label,
                 spec.length_scale, pts.size)
    return [FunctionSample(pts, row) for row in values]


def derive_advection_speed(v: FunctionSample) -> FunctionSample:
    """Shift a sample so that its minimum over the grid is exactly 1."""
    return FunctionSample(v.grid, v.values - v.values.min() + 1.0)
