"""
multifidelity.py – Gaussian-process and neural multifidelity surrogates.

The pre-trained DeepONet is a cheap low-fidelity model of the target
field; a handful of observations is the high-fidelity data.

GPR
---
Kriging with a constant mean profiled out by generalised least squares.
Length scale, signal variance and (optionally) noise variance are fitted
in log space by L-BFGS-B on the negative log marginal likelihood, from
the initial point plus five random restarts; the best candidate wins,
ties going to the lowest index.

MFGPR
-----
Autoregressive two-level model

    u_H(ξ) = ρ · μ_L(ξ) + δ(ξ)

μ_L is the posterior mean of a GP fitted to at most 400 low-fidelity
points; δ is a second GP whose mean basis [μ_L, 1] makes ρ a generalised
least squares coefficient of the high-fidelity likelihood.

MFNN
----
A low-fidelity network fitted to dense DeepONet predictions, then frozen;
a linear and an L2-regularised nonlinear network map (ξ, y_L) to the
high-fidelity value.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import torch
from numpy.typing import ArrayLike, NDArray
from scipy.linalg import cho_solve
from scipy.optimize import minimize
from scipy.spatial.distance import cdist, pdist
from torch import Tensor, nn

from .errors import DegenerateData, DimensionMismatch, NonFiniteLoss, NotPSD
from .fields import kernel_from_distance
from .nd_core import DTYPE, Mlp, adam_step, cholesky_psd, make_adam, param_grad
from .types import ActivationKind, KernelKind, MfnnConfig, ProblemKind, TrainHistory

logger = logging.getLogger(__name__)

LENGTH_BOUNDS   = (1e-2, 10.0)
VARIANCE_BOUNDS = (1e-4, 1e2)
NOISE_BOUNDS    = (1e-10, 1.0)
NOISE_FLOOR     = 1e-10
RESTARTS        = 5
MAX_LOW_POINTS  = 400


# ---------------------------------------------------------------------------
# Gaussian process regression
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GprModel:
    kernel:          KernelKind
    length_scale:    float
    signal_variance: float
    noise_variance:  float
    x:               NDArray[np.float64]       # (n, d)
    y:               NDArray[np.float64]       # (n,)
    beta:            NDArray[np.float64]       # mean coefficients, one per basis column
    chol:            NDArray[np.float64]       # lower factor of K + noise·I (+ jitter)
    alpha:           NDArray[np.float64]       # K⁻¹ (y − Fβ)
    nlml:            float
    periodicity:     float = 1.0

    @property
    def dim(self) -> int:
        return int(self.x.shape[1])


@dataclass
class _Fit:
    theta: NDArray[np.float64]
    nlml:  float


def _as_points(x: ArrayLike, what: str, dim: Optional[int] = None) -> NDArray[np.float64]:
    pts = np.asarray(x, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts.reshape(-1, 1) if dim in (None, 1) else pts.reshape(1, -1)
    if pts.ndim != 2 or (dim is not None and pts.shape[1] != dim):
        raise DimensionMismatch(f"(n, {dim or 'd'})", pts.shape, what)
    return pts


def _basis(basis: Optional[ArrayLike], n: int) -> NDArray[np.float64]:
    if basis is None:
        return np.ones((n, 1))
    return np.asarray(basis, dtype=np.float64).reshape(n, -1)


def _kernel_and_length_grad(
    kind: KernelKind, r: NDArray[np.float64], l: float, p: float
) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    """Unit-variance kernel and its derivative with respect to log l."""
    k = kernel_from_distance(kind, r, l, p)
    if kind is KernelKind.RBF:
        return k, k * (r / l) ** 2
    if kind is KernelKind.EXP_SINE_SQUARED:
        return k, k * 4.0 * np.sin(np.pi * r / p) ** 2 / l ** 2
    z = math.sqrt(3.0) * r / l
    return k, z ** 2 * np.exp(-z)


def _unpack(theta: NDArray[np.float64], fixed_noise: Optional[float]) -> tuple[float, float, float]:
    l, s = math.exp(theta[0]), math.exp(theta[1])
    noise = fixed_noise if fixed_noise is not None else math.exp(theta[2])
    return l, s, max(noise, NOISE_FLOOR)


def _profile(
    chol: NDArray[np.float64], f: NDArray[np.float64], y: NDArray[np.float64]
) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    """GLS mean coefficients β and α = K⁻¹(y − Fβ)."""
    kinv_f = cho_solve((chol, True), f)
    a      = f.T @ kinv_f
    beta   = np.linalg.solve(a, kinv_f.T @ y)
    return beta, cho_solve((chol, True), y - f @ beta)


def _nlml_and_grad(
    theta: NDArray[np.float64],
    kind: KernelKind,
    r: NDArray[np.float64],
    f: NDArray[np.float64],
    y: NDArray[np.float64],
    periodicity: float,
    fixed_noise: Optional[float],
) -> tuple[float, NDArray[np.float64]]:
    l, s, noise = _unpack(theta, fixed_noise)
    k, dk_dl    = _kernel_and_length_grad(kind, r, l, periodicity)
    n           = len(y)
    chol, _     = cholesky_psd(s * k + noise * np.eye(n))
    beta, alpha = _profile(chol, f, y)
    resid = y - f @ beta
    nlml  = (0.5 * float(resid @ alpha) + float(np.sum(np.log(np.diag(chol))))
             + 0.5 * n * math.log(2 * math.pi))
    w     = cho_solve((chol, True), np.eye(n)) - np.outer(alpha, alpha)
    grads = [0.5 * float(np.sum(w * (s * dk_dl))), 0.5 * float(np.sum(w * (s * k)))]
    if fixed_noise is None:
        grads.append(0.5 * noise * float(np.trace(w)))
    return nlml, np.array(grads)


def _kriging_fit(
    x: ArrayLike,
    y: ArrayLike,
    basis: Optional[ArrayLike],
    kernel: KernelKind,
    *,
    noise: Optional[float],
    periodicity: float,
    seed: int,
    restarts: int,
    min_points: int = 1,
) -> GprModel:
    pts = _as_points(x, "training inputs")
    obs = np.asarray(y, dtype=np.float64).reshape(-1)
    if len(obs) != len(pts):
        raise DimensionMismatch(len(pts), len(obs), "training targets")
    if len(obs) < min_points:
        raise DegenerateData(f"at least {min_points} training point(s) required, got {len(obs)}")
    if len(obs) > 1 and float(np.min(pdist(pts))) == 0.0:
        raise DegenerateData("duplicated training locations")
    f = _basis(basis, len(obs))
    if np.linalg.matrix_rank(f) < f.shape[1]:
        raise DegenerateData("mean basis is rank deficient")

    r      = cdist(pts, pts)
    fixed  = None if noise is None else max(noise, NOISE_FLOOR)
    bounds = [tuple(np.log(LENGTH_BOUNDS)), tuple(np.log(VARIANCE_BOUNDS))]
    if fixed is None:
        bounds.append(tuple(np.log(NOISE_BOUNDS)))
    spread = float(np.var(obs))
    s0     = float(np.clip(spread if spread > 0 else 1.0, *VARIANCE_BOUNDS))
    start  = [math.log(0.5), math.log(s0)]
    if fixed is None:
        start.append(math.log(1e-6))
    rng = np.random.default_rng(seed)
    candidates = [np.array(start)] + [
        np.array([rng.uniform(lo, hi) for lo, hi in bounds]) for _ in range(restarts)
    ]

    def run(theta0: NDArray[np.float64]) -> Optional[_Fit]:
        try:
            init = _nlml_and_grad(theta0, kernel, r, f, obs, periodicity, fixed)[0]
            res  = minimize(_nlml_and_grad, theta0, args=(kernel, r, f, obs, periodicity, fixed),
                            jac=True, method="L-BFGS-B", bounds=bounds)
        except NotPSD as exc:
            logger.warning("GPR restart from %s dropped: %s", np.round(theta0, 3), exc)
            return None
        if not math.isfinite(res.fun) or res.fun > init:
            return _Fit(theta0, init)
        return _Fit(np.asarray(res.x), float(res.fun))

    with ThreadPoolExecutor(max_workers=len(candidates)) as pool:
        fits = list(pool.map(run, candidates))
    ok = [fit for fit in fits if fit is not None]
    if not ok:
        raise NotPSD(1e-4)
    best = min(ok, key=lambda fit: fit.nlml)   # min keeps the first of equal values

    l, s, noise_var = _unpack(best.theta, fixed)
    k = kernel_from_distance(kernel, r, l, periodicity)
    chol, _ = cholesky_psd(s * k + noise_var * np.eye(len(obs)))
    beta, alpha = _profile(chol, f, obs)
    logger.debug("GPR fit: l=%.4g s=%.4g noise=%.3g nlml=%.4g", l, s, noise_var, best.nlml)
    return GprModel(kernel, l, s, noise_var, pts, obs, beta, chol, alpha, best.nlml, periodicity)


def gpr_fit(
    x: ArrayLike,
    y: ArrayLike,
    kernel: KernelKind = KernelKind.RBF,
    *,
    noise: Optional[float] = NOISE_FLOOR,
    periodicity: float = 1.0,
    seed: int = 0,
    restarts: int = RESTARTS,
) -> GprModel:
    """
    Fit a single-fidelity GP on at least two points.  ``noise=None`` also
    optimises the noise variance within [1e-10, 1]; otherwise it is held fixed.
    """
    return _kriging_fit(x, y, None, kernel, noise=noise, periodicity=periodicity,
                        seed=seed, restarts=restarts, min_points=2)


def _cross(model: GprModel, xi: ArrayLike) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    pts = _as_points(xi, "query points", model.dim)
    k   = model.signal_variance * kernel_from_distance(
        model.kernel, cdist(pts, model.x), model.length_scale, model.periodicity)
    return pts, k


def gpr_predict(
    model: GprModel, xi: ArrayLike, basis: Optional[ArrayLike] = None
) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    """Posterior mean and variance (latent, without noise) at (N, d) points."""
    pts, k = _cross(model, xi)
    f = _basis(basis, len(pts))
    mean = f @ model.beta + k @ model.alpha
    v    = cho_solve((model.chol, True), k.T)
    var  = np.maximum(model.signal_variance - np.sum(k * v.T, axis=1), 0.0)
    return mean, var


def log_marginal_likelihood(model: GprModel) -> float:
    return -model.nlml


# ---------------------------------------------------------------------------
# Multifidelity GPR
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MfgprModel:
    low:   GprModel
    delta: GprModel
    rho:   float
    fixed_rho: bool = False

    @property
    def offset(self) -> float:
        return float(self.delta.beta[-1])


def mfgpr_fit(
    low_x: ArrayLike,
    low_y: ArrayLike,
    high_x: ArrayLike,
    high_y: ArrayLike,
    kernel: KernelKind = KernelKind.RBF,
    *,
    rho: Optional[float] = None,
    noise: Optional[float] = NOISE_FLOOR,
    max_low: int = MAX_LOW_POINTS,
    seed: int = 0,
) -> MfgprModel:
    """
    Two-stage autoregressive fit.

    The low-fidelity set is uniformly subsampled to ``max_low`` points.
    ``rho`` fixes the scaling factor instead of estimating it; with a
    single high-fidelity point ρ is fixed at 1.
    """
    sx = _as_points(low_x, "low-fidelity inputs")
    sy = np.asarray(low_y, dtype=np.float64).reshape(-1)
    hy = np.asarray(high_y, dtype=np.float64).reshape(-1)
    if len(hy) == 0:
        raise DegenerateData("high-fidelity data set is empty")
    hx = _as_points(high_x, "high-fidelity inputs", sx.shape[1])
    if len(sy) != len(sx):
        raise DimensionMismatch(len(sx), len(sy), "low-fidelity targets")
    rng = np.random.default_rng(seed)
    if len(sx) > max_low:
        idx = np.sort(rng.choice(len(sx), size=max_low, replace=False))
        sx, sy = sx[idx], sy[idx]
        logger.debug("MFGPR low-fidelity set subsampled to %d points", max_low)

    low = gpr_fit(sx, sy, kernel, noise=noise, seed=seed)
    mu_low, _ = gpr_predict(low, hx)
    if rho is None and len(hy) < 2:
        logger.warning("MFGPR with one high-fidelity point: rho fixed at 1")
        rho = 1.0
    if rho is not None:
        delta = _kriging_fit(hx, hy - rho * mu_low, None, kernel, noise=noise, periodicity=1.0,
                             seed=seed, restarts=RESTARTS)
        return MfgprModel(low, delta, float(rho), fixed_rho=True)
    delta = _kriging_fit(hx, hy, np.column_stack([mu_low, np.ones_like(mu_low)]), kernel,
                         noise=noise, periodicity=1.0, seed=seed, restarts=RESTARTS)
    logger.debug("MFGPR fit: rho=%.4g", delta.beta[0])
    return MfgprModel(low, delta, float(delta.beta[0]))


def mfgpr_predict(model: MfgprModel, xi: ArrayLike) -> NDArray[np.float64]:
    mu_low, _ = gpr_predict(model.low, xi)
    if model.fixed_rho:
        mean, _ = gpr_predict(model.delta, xi)
        return model.rho * mu_low + mean
    mean, _ = gpr_predict(model.delta, xi, np.column_stack([mu_low, np.ones_like(mu_low)]))
    return mean


# ---------------------------------------------------------------------------
# Multifidelity neural network
# ---------------------------------------------------------------------------

_MFNN_L2 = {20: 1e-5, 50: 1e-6, 100: 1e-7, 200: 1e-8}


def mfnn_l2_strength(problem: ProblemKind, n_obs: int) -> float:
    """Regularisation of the nonlinear correlation net by observation count."""
    if problem is ProblemKind.ANTIDERIVATIVE:
        return 1e-6
    bucket = min(_MFNN_L2, key=lambda n: (abs(math.log(max(n_obs, 1) / n)), n))
    return _MFNN_L2[bucket]


def mfnn_config(problem: ProblemKind, n_obs: int, seed: int = 0) -> MfnnConfig:
    """Network sizes and learning rate per problem."""
    if problem is ProblemKind.ANTIDERIVATIVE:
        sizes = dict(low_depth=4, low_width=40, high_depth=3, high_width=30, lr=0.005)
    else:
        sizes = dict(low_depth=4, low_width=128, high_depth=3, high_width=15, lr=0.001)
    return MfnnConfig(**sizes, l2=mfnn_l2_strength(problem, n_obs), seed=seed)


def _layers(n_in: int, depth: int, width: int) -> list[int]:
    return [n_in] + [width] * (depth - 1) + [1]


class Mfnn(nn.Module):
    """y_H(ξ) = linear(ξ, y_L(ξ)) + nonlinear(ξ, y_L(ξ))."""

    def __init__(self, query_dim: int, config: MfnnConfig) -> None:
        super().__init__()
        generator      = torch.Generator().manual_seed(config.seed)
        self.config    = config
        self.query_dim = query_dim
        self.low       = Mlp(_layers(query_dim, config.low_depth, config.low_width),
                             config.activation, generator=generator)
        self.linear    = Mlp([query_dim + 1, 1], ActivationKind.IDENTITY, generator=generator)
        self.nonlinear = Mlp(_layers(query_dim + 1, config.high_depth, config.high_width),
                             config.activation, generator=generator)

    def low_fidelity(self, xi: Tensor) -> Tensor:
        return self.low(xi)[..., 0]

    def forward(self, xi: Tensor) -> Tensor:
        z = torch.cat([xi, self.low_fidelity(xi).unsqueeze(-1)], dim=-1)
        return self.linear(z)[..., 0] + self.nonlinear(z)[..., 0]

    def l2_penalty(self) -> Tensor:
        return torch.stack([(lin.weight ** 2).sum() for lin in self.nonlinear.linears]).sum()


@dataclass
class MfnnHistory:
    low:  TrainHistory = field(default_factory=TrainHistory)
    high: TrainHistory = field(default_factory=TrainHistory)


def _adam_fit(
    params: list[nn.Parameter],
    loss_fn: Callable[[], Tensor],
    iterations: int,
    lr: float,
) -> TrainHistory:
    opt     = make_adam(params, lr)
    history = TrainHistory()
    log_every = max(1, iterations // 10)
    for it in range(iterations + 1):
        loss  = loss_fn()
        value = float(loss)
        if not math.isfinite(value):
            raise NonFiniteLoss(it, history)
        if it % log_every == 0 or it == iterations:
            history.record(it, value)
        if it == iterations:
            break
        adam_step(opt, params, param_grad(loss, params))
    return history


def mfnn_fit(
    low_x: ArrayLike,
    low_y: ArrayLike,
    high_x: ArrayLike,
    high_y: ArrayLike,
    config: Optional[MfnnConfig] = None,
) -> tuple[Mfnn, MfnnHistory]:
    """
    Fit the low-fidelity net to (low_x, low_y), freeze it, then fit the
    correlation nets to the high-fidelity data with L2 on the nonlinear
    weights.
    """
    config = config or MfnnConfig()
    sx = torch.as_tensor(_as_points(low_x, "low-fidelity inputs"), dtype=DTYPE)
    sy = torch.as_tensor(np.asarray(low_y, dtype=np.float64).reshape(-1), dtype=DTYPE)
    if np.size(high_y) < 1:
        raise DegenerateData("high-fidelity data set is empty")
    hx = torch.as_tensor(_as_points(high_x, "high-fidelity inputs", sx.shape[1]), dtype=DTYPE)
    hy = torch.as_tensor(np.asarray(high_y, dtype=np.float64).reshape(-1), dtype=DTYPE)
    if len(sy) != len(sx) or len(hy) != len(hx):
        raise DimensionMismatch("one target per point", (len(sy), len(hy)), "multifidelity data")

    model   = Mfnn(int(sx.shape[1]), config)
    history = MfnnHistory()
    low_params = list(model.low.parameters())
    history.low = _adam_fit(low_params,
                            lambda: torch.mean((model.low_fidelity(sx) - sy) ** 2),
                            config.iterations, config.lr)
    for p in low_params:
        p.requires_grad_(False)

    high_params = list(model.linear.parameters()) + list(model.nonlinear.parameters())
    history.high = _adam_fit(
        high_params,
        lambda: torch.mean((model(hx) - hy) ** 2) + config.l2 * model.l2_penalty(),
        config.iterations, config.lr,
    )
    logger.debug("MFNN fit: low loss %.3e, high loss %.3e",
                 history.low.train_loss[-1], history.high.train_loss[-1])
    return model, history


def mfnn_predict(model: Mfnn, xi: ArrayLike) -> NDArray[np.float64]:
    pts = _as_points(xi, "query points", model.query_dim)
    with torch.no_grad():
        return model(torch.as_tensor(pts, dtype=DTYPE)).numpy()
