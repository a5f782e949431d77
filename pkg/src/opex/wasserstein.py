"""
wasserstein.py – Extrapolation complexity between Gaussian random fields.

The distance between the training and test input spaces is the
2-Wasserstein distance between two mean-zero Gaussian measures with
covariance operators K1 and K2:

    W2² = Tr K1 + Tr K2 - 2 Tr (K1^½ K2 K1^½)^½

Operators are discretised with the rectangle rule (Gram matrix × Δx, each
of the n nodes owning a cell of width L/n) so Tr K equals ∫ k(x, x) dx on
any grid.  The cross term is evaluated as the nuclear norm of K1^½ K2^½,
whose singular values are the eigenvalues of (K1^½ K2 K1^½)^½ without a
second square root of round-off.

Error growth with W2 is summarised by a power law fitted in log-log space.
"""

from __future__ import annotations

import logging
import math
from typing import Sequence

import numpy as np
import scipy.linalg
import scipy.stats
from numpy.typing import ArrayLike, NDArray

from .errors import DegenerateFit, DimensionMismatch, EigenFailure
from .fields import gram_matrix
from .nd_core import sqrtm_psd
from .types import GaussianFieldSpec, PowerLawFit

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Covariance operators and W2
# ---------------------------------------------------------------------------

def cov_operator_matrix(spec: GaussianFieldSpec, grid: ArrayLike) -> NDArray[np.float64]:
    """K[i, j] = k(x_i, x_j) · Δx on a uniform n-point grid over [a, b], Δx = (b - a) / n."""
    pts = np.asarray(grid, dtype=np.float64)
    if pts.ndim != 1 or pts.size < 2:
        raise DimensionMismatch("uniform 1D grid with >= 2 points", pts.shape, "operator grid")
    steps = np.diff(pts)
    if not np.allclose(steps, steps[0], rtol=1e-9, atol=0.0) or steps[0] <= 0:
        raise ValueError("covariance operators need a uniform increasing grid")
    dx = (pts[-1] - pts[0]) / pts.size
    return gram_matrix(spec, pts) * dx


def w2_gaussian(k1: ArrayLike, k2: ArrayLike) -> float:
    """W2 between N(0, k1) and N(0, k2) for discretised covariance operators."""
    a = np.asarray(k1, dtype=np.float64)
    b = np.asarray(k2, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatch(a.shape, b.shape, "covariance operator")
    if np.array_equal(a, b):
        return 0.0
    s1 = sqrtm_psd(a)
    s2 = sqrtm_psd(b)
    try:
        fidelity = float(scipy.linalg.svdvals(s1 @ s2).sum())
    except np.linalg.LinAlgError as exc:
        raise EigenFailure(str(exc)) from exc
    sq = float(np.trace(a) + np.trace(b) - 2.0 * fidelity)
    return math.sqrt(max(sq, 0.0))


def w2_distance(spec1: GaussianFieldSpec, spec2: GaussianFieldSpec, grid: ArrayLike) -> float:
    if spec1 == spec2:
        return 0.0
    return w2_gaussian(cov_operator_matrix(spec1, grid), cov_operator_matrix(spec2, grid))


# ---------------------------------------------------------------------------
# Power laws
# ---------------------------------------------------------------------------

def fit_power_law(points: Sequence[tuple[float, float]], confidence: float = 0.95) -> PowerLawFit:
    """
    Ordinary least squares of log(error) on log(W2).

    Parameters
    ----------
    points     : (W2, error) pairs, at least three, all positive
    confidence : two-sided level of the exponent's t interval
    """
    if len(points) < 3:
        raise ValueError(f"a power-law fit needs at least 3 points, got {len(points)}")
    arr = np.asarray(points, dtype=np.float64)
    if np.any(arr <= 0) or not np.all(np.isfinite(arr)):
        raise ValueError("W2 values and errors must be positive and finite")
    x, y = np.log(arr[:, 0]), np.log(arr[:, 1])
    if np.ptp(x) == 0:
        raise DegenerateFit()
    res       = scipy.stats.linregress(x, y)
    dof       = len(points) - 2
    stderr    = float(res.stderr) if np.isfinite(res.stderr) else 0.0
    halfwidth = float(scipy.stats.t.ppf(0.5 + confidence / 2.0, dof)) * stderr
    residuals = y - (res.intercept + res.slope * x)
    logger.debug("Power law exponent %.3f ± %.3f over %d points", res.slope, stderr, len(points))
    return PowerLawFit(
        exponent        = float(res.slope),
        log_intercept   = float(res.intercept),
        exponent_stderr = stderr,
        ci_low          = float(res.slope) - halfwidth,
        ci_high         = float(res.slope) + halfwidth,
        dof             = dof,
        residuals       = residuals.tolist(),
    )


def compare_slopes(fit1: PowerLawFit, fit2: PowerLawFit) -> float:
    """Two-sided p-value for equal exponents, pooling the two standard errors."""
    diff = fit1.exponent - fit2.exponent
    if diff == 0.0:
        return 1.0
    pooled = math.sqrt(fit1.exponent_stderr ** 2 + fit2.exponent_stderr ** 2)
    if pooled == 0.0:
        return 0.0
    t = abs(diff) / pooled
    return float(2.0 * scipy.stats.t.sf(t, fit1.dof + fit2.dof))
