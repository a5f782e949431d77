"""
extrapolation.py – Detecting and repairing harmful extrapolation.

Detection
---------
Two mismatch errors measure how far a pre-trained DeepONet is from the
truth for a new input v without knowing the solution:

  E_phys  mean |F[ũ; v]| over a uniform grid of the domain
  E_obs   root relative squared error against a few observations

ε0 is the mean mismatch over fresh functions from the training space; an
input is flagged as harmful extrapolation when its mismatch exceeds α·ε0.

Repair
------
  ft_phys          Adam on the physics loss, branch input frozen at v
  ft_obs_alone     L-BFGS (or Adam) on the observation MSE alone
  ft_obs_together  Adam on the training-set MSE + λ · observation MSE,
                   optionally adapting λ by gradient ascent
  train_pinn       baseline: a fresh trunk-sized network trained on the
                   physics loss of v alone

Every fine-tune works on a deep copy of the model; only the parameters of
the selected subset are ever updated.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Generic, Mapping, Optional, Sequence, TypeVar, Union

import numpy as np
import torch
from numpy.typing import ArrayLike, NDArray
from torch import Tensor, nn

from .dataset import OperatorDataset
from .deeponet import DeepONet, clone_model, forward_at, l2_relative_error
from .errors import DimensionMismatch, NonFiniteLoss, ZeroReference
from .fields import FunctionSample, sample_values, sensor_grid
from .nd_core import DTYPE, Mlp, adam_step, lbfgs_parameters, make_adam, param_grad
from .solvers import (
    HardConstraint,
    ProblemDef,
    generate_dataset,
    make_collocation,
    physics_loss,
    residual_values,
    sensor_interpolant,
)
from .types import (
    ActivationKind,
    Decision,
    DeepONetConfig,
    FineTuneSpec,
    GaussianFieldSpec,
    MismatchKind,
    MismatchReport,
    Observations,
    OptimizerKind,
    ParamSubset,
    ThresholdCalibration,
    TrainHistory,
)

logger = logging.getLogger(__name__)

Surrogate = Union[DeepONet, Callable[[Tensor], Tensor]]
ModelT    = TypeVar("ModelT", bound=nn.Module)


@dataclass
class FineTuneResult(Generic[ModelT]):
    model:   ModelT
    history: TrainHistory
    lambdas: list[float] = field(default_factory=list)


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------

def _as_sample(v: Union[FunctionSample, ArrayLike]) -> FunctionSample:
    if isinstance(v, FunctionSample):
        return v
    values = np.asarray(v, dtype=np.float64)
    return FunctionSample(sensor_grid(values.size), values)


def _field(surrogate: Surrogate, v: FunctionSample) -> Callable[[Tensor], Tensor]:
    if isinstance(surrogate, DeepONet):
        return surrogate.field_fn(v.values)
    return surrogate


def _evaluate(surrogate: Surrogate, v: FunctionSample, points: NDArray[np.float64]) -> Tensor:
    if isinstance(surrogate, DeepONet):
        return forward_at(surrogate, v, points)
    return surrogate(torch.as_tensor(points, dtype=DTYPE))


def rrse(pred: ArrayLike, true: ArrayLike) -> float:
    """sqrt(Σ(pred − true)² / Σ true²)."""
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(true, dtype=np.float64)
    if p.shape != t.shape:
        raise DimensionMismatch(t.shape, p.shape, "prediction")
    denom = float(np.sum(t * t))
    if denom == 0.0:
        raise ZeroReference()
    return math.sqrt(float(np.sum((p - t) ** 2)) / denom)


def observe(
    points: ArrayLike,
    values: ArrayLike,
    n_obs: int,
    rng: np.random.Generator,
    *,
    noise_level: float = 0.0,
    fixed_locations: Optional[Sequence[Sequence[float]]] = None,
) -> Observations:
    """
    Observations of a reference field known at ``points``.

    Locations are ``n_obs`` distinct grid points drawn uniformly, or the grid
    points nearest to ``fixed_locations``.  Noise is Gaussian with standard
    deviation ``noise_level`` times the RMS of the clean observed values.
    """
    pts  = np.asarray(points, dtype=np.float64)
    vals = np.asarray(values, dtype=np.float64)
    pts  = pts.reshape(len(vals), -1)
    if fixed_locations is not None:
        wanted = np.asarray(fixed_locations, dtype=np.float64).reshape(-1, pts.shape[1])
        idx = np.array([int(np.argmin(np.sum((pts - w) ** 2, axis=1))) for w in wanted])
    else:
        if not 1 <= n_obs <= len(vals):
            raise ValueError(f"n_obs must be in [1, {len(vals)}], got {n_obs}")
        idx = np.sort(rng.choice(len(vals), size=n_obs, replace=False))
    clean = vals[idx]
    noisy = clean
    if noise_level > 0:
        scale = noise_level * math.sqrt(float(np.mean(clean ** 2)))
        noisy = clean + scale * rng.standard_normal(clean.shape)
    return Observations(locations=pts[idx].tolist(), values=noisy.tolist(), noise_level=noise_level)


def subset_parameters(model: DeepONet, subset: ParamSubset) -> list[nn.Parameter]:
    if subset is ParamSubset.BRANCH_AND_TRUNK:
        return list(model.parameters())
    if subset is ParamSubset.BRANCH:
        return list(model.branch.parameters())
    if subset is ParamSubset.TRUNK:
        return list(model.trunk.parameters())
    return list(model.trunk.linears[-1].parameters())


# ---------------------------------------------------------------------------
# Mismatch errors and the decision rule
# ---------------------------------------------------------------------------

def mismatch_phys(
    model: Surrogate,
    v: Union[FunctionSample, ArrayLike],
    problem: ProblemDef,
    grid: Optional[ArrayLike] = None,
) -> float:
    """Mean |F[ũ; v]| over a uniform grid (101 × 101 by default), branch input fixed at v."""
    if isinstance(model, DeepONet):
        problem.check_activation(model.config.trunk_activation)
    sample = _as_sample(v)
    pts  = problem.quadrature_grid() if grid is None else np.asarray(grid, dtype=np.float64)
    v_at = sensor_interpolant(sample.grid, sample.values)(pts[:, 0])
    res  = residual_values(problem, _field(model, sample), pts, v_at)
    return float(torch.mean(torch.abs(res)).detach())


def mismatch_obs(model: Surrogate, v: Union[FunctionSample, ArrayLike], obs: Observations) -> float:
    """RRSE of the surrogate at the observation locations."""
    sample = _as_sample(v)
    pts    = np.asarray(obs.locations, dtype=np.float64)
    with torch.no_grad():
        pred = _evaluate(model, sample, pts).numpy()
    return rrse(pred, obs.values)


def calibrate_threshold(
    model: DeepONet,
    problem: ProblemDef,
    field_spec: GaussianFieldSpec,
    alpha: float = 1.5,
    n_validation: int = 100,
    seed: int = 0,
    *,
    mode: MismatchKind = MismatchKind.PHYS,
    n_obs: int = 7,
) -> ThresholdCalibration:
    """ε0 = mean mismatch over ``n_validation`` fresh functions drawn at the training length."""
    if alpha < 1:
        raise ValueError(f"alpha must be >= 1, got {alpha}")
    rng = np.random.default_rng(seed)
    sensors = sensor_grid(model.config.sensor_count)
    if mode is MismatchKind.PHYS:
        raw = sample_values(field_spec, sensors, n_validation, rng)
        samples = [mismatch_phys(model, problem.prepare(FunctionSample(sensors, row)), problem)
                   for row in raw]
    else:
        data = generate_dataset(problem, field_spec, n_validation, seed, sensors=sensors)
        samples = []
        for i in range(len(data)):
            obs = observe(data.queries_for(i), data.targets[i], n_obs, rng)
            samples.append(mismatch_obs(model, FunctionSample(sensors, data.branch_inputs[i]), obs))
    cal = ThresholdCalibration(mode=mode, eps0=float(np.mean(samples)), alpha=alpha,
                               n_validation=n_validation, samples=samples)
    logger.info("Calibrated %s threshold: eps0=%.4e, eps=%.4e over %d functions",
                mode.name, cal.eps0, cal.eps, n_validation)
    return cal


def decide(
    calibrations: Mapping[MismatchKind, ThresholdCalibration],
    *,
    e_phys: Optional[float] = None,
    e_obs: Optional[float] = None,
) -> MismatchReport:
    """
    In./Ex.- versus Ex.+ for one input.

    With both mismatches available, the one with the larger ratio to its
    own ε0 drives the decision.
    """
    candidates: list[tuple[MismatchKind, float, ThresholdCalibration]] = []
    if e_phys is not None:
        candidates.append((MismatchKind.PHYS, e_phys, calibrations[MismatchKind.PHYS]))
    if e_obs is not None:
        candidates.append((MismatchKind.OBS, e_obs, calibrations[MismatchKind.OBS]))
    if not candidates:
        raise ValueError("at least one mismatch error is required")

    def ratio(item: tuple[MismatchKind, float, ThresholdCalibration]) -> float:
        _, err, cal = item
        if cal.eps0 == 0.0:
            return math.inf if err > 0 else 0.0
        return err / cal.eps0

    kind, err, cal = max(candidates, key=ratio)
    decision = Decision.EX_PLUS if err > cal.eps else Decision.INTERPOLATION_OR_EX_MINUS
    return MismatchReport(e_phys=e_phys, e_obs=e_obs, eps0=cal.eps0, alpha=cal.alpha,
                          driver=kind, decision=decision)


# ---------------------------------------------------------------------------
# Fine-tuning
# ---------------------------------------------------------------------------

def _reference_errors(
    model: Surrogate,
    v: FunctionSample,
    reference: Optional[tuple[NDArray[np.float64], NDArray[np.float64]]],
) -> dict[str, float]:
    if reference is None:
        return {}
    with torch.no_grad():
        pred = _evaluate(model, v, reference[0]).numpy()
    return {"target": l2_relative_error(pred, reference[1])}


def _adam_loop(
    params: list[nn.Parameter],
    loss_fn: Callable[[int], Tensor],
    spec: FineTuneSpec,
    errors_fn: Callable[[], dict[str, float]],
    after_step: Optional[Callable[[int], None]] = None,
) -> TrainHistory:
    opt     = make_adam(params, spec.lr)
    history = TrainHistory()
    for it in range(spec.iterations + 1):
        loss  = loss_fn(it)
        value = float(loss)
        if not math.isfinite(value):
            raise NonFiniteLoss(it, history)
        if it % spec.log_every == 0 or it == spec.iterations:
            history.record(it, value, errors_fn())
        if it == spec.iterations:
            break
        adam_step(opt, params, param_grad(loss, params))
        if after_step is not None:
            after_step(it + 1)
    return history


def ft_phys(
    model: DeepONet,
    v: Union[FunctionSample, ArrayLike],
    problem: ProblemDef,
    spec: FineTuneSpec,
    *,
    reference: Optional[tuple[NDArray[np.float64], NDArray[np.float64]]] = None,
) -> FineTuneResult[DeepONet]:
    """
    Fine-tune a copy of ``model`` on the physics loss of v.

    ``reference`` (points, values) only adds a logged error trajectory.
    """
    problem.check_activation(model.config.trunk_activation)
    sample = _as_sample(v)
    tuned  = clone_model(model)
    params = subset_parameters(tuned, spec.subset)
    colloc = make_collocation(problem, sample.grid, sample.values[None], n_domain=spec.n_domain,
                              n_boundary=spec.n_boundary, rng=np.random.default_rng(spec.seed))
    fn = tuned.field_fn(sample.values)
    history = _adam_loop(
        params,
        lambda _: physics_loss(problem, fn, colloc, spec.w_f, spec.w_b),
        spec,
        lambda: _reference_errors(tuned, sample, reference),
    )
    logger.debug("FT-Phys (%s) finished: loss %.3e", spec.subset.label, history.train_loss[-1])
    return FineTuneResult(tuned, history)


def _obs_arrays(obs: Observations) -> tuple[NDArray[np.float64], Tensor]:
    return (np.asarray(obs.locations, dtype=np.float64),
            torch.as_tensor(obs.values, dtype=DTYPE))


def ft_obs_alone(
    model: DeepONet,
    v: Union[FunctionSample, ArrayLike],
    obs: Observations,
    spec: Optional[FineTuneSpec] = None,
    *,
    reference: Optional[tuple[NDArray[np.float64], NDArray[np.float64]]] = None,
) -> FineTuneResult[DeepONet]:
    """Fit a copy of ``model`` to the observations alone (L-BFGS, 500 iterations by default)."""
    spec   = spec or FineTuneSpec(optimizer=OptimizerKind.LBFGS, iterations=500)
    sample = _as_sample(v)
    tuned  = clone_model(model)
    params = subset_parameters(tuned, spec.subset)
    pts, target = _obs_arrays(obs)

    def loss_fn(_: int = 0) -> Tensor:
        return torch.mean((forward_at(tuned, sample, pts) - target) ** 2)

    if spec.optimizer is OptimizerKind.ADAM:
        history = _adam_loop(params, loss_fn, spec,
                             lambda: _reference_errors(tuned, sample, reference))
        return FineTuneResult(tuned, history)

    history = TrainHistory()
    with torch.no_grad():
        start = float(loss_fn())
    history.record(0, start, _reference_errors(tuned, sample, reference))
    result = lbfgs_parameters(params, loss_fn, max_iter=spec.iterations)
    if not math.isfinite(result.loss):
        raise NonFiniteLoss(result.iterations, history)
    if result.iterations > 0:
        history.record(result.iterations, result.loss, _reference_errors(tuned, sample, reference))
    logger.debug("FT-Obs-A L-BFGS: %d iterations, loss %.3e, %d fallbacks",
                 result.iterations, result.loss, len(result.fallbacks))
    return FineTuneResult(tuned, history)


def ft_obs_together(
    model: DeepONet,
    v: Union[FunctionSample, ArrayLike],
    obs: Observations,
    trainset: OperatorDataset,
    spec: FineTuneSpec,
    *,
    reference: Optional[tuple[NDArray[np.float64], NDArray[np.float64]]] = None,
) -> FineTuneResult[DeepONet]:
    """
    Minimise L_T + λ·L_obs on a copy of ``model``.

    λ is ``spec.lam``.  With ``spec.adaptive_lambda`` it starts at
    ``spec.initial_lambda`` instead and grows by ``spec.lambda_rate · L_obs``
    (the derivative of the total loss with respect to λ) every
    ``spec.lambda_every`` updates.
    """
    sample = _as_sample(v)
    tuned  = clone_model(model)
    params = subset_parameters(tuned, spec.subset)
    pts, target = _obs_arrays(obs)
    v_train = torch.as_tensor(trainset.branch_inputs, dtype=DTYPE)
    xi      = torch.as_tensor(trainset.queries, dtype=DTYPE)
    y       = torch.as_tensor(trainset.targets, dtype=DTYPE)
    lam     = spec.initial_lambda if spec.adaptive_lambda else spec.lam
    state   = {"lam": lam, "l_obs": 0.0}
    lambdas = [lam]

    def loss_fn(_: int) -> Tensor:
        l_train = torch.mean((tuned(v_train, xi) - y) ** 2)
        l_obs   = torch.mean((forward_at(tuned, sample, pts) - target) ** 2)
        state["l_obs"] = float(l_obs)
        return l_train + state["lam"] * l_obs

    def update_lambda(step: int) -> None:
        if spec.adaptive_lambda and step % spec.lambda_every == 0:
            state["lam"] += spec.lambda_rate * state["l_obs"]
            lambdas.append(state["lam"])

    history = _adam_loop(params, loss_fn, spec,
                         lambda: _reference_errors(tuned, sample, reference), update_lambda)
    return FineTuneResult(tuned, history, lambdas)


# ---------------------------------------------------------------------------
# PINN baseline
# ---------------------------------------------------------------------------

class PinnSurrogate(nn.Module):
    """Plain network u(ξ) with the problem's hard constraint applied."""

    def __init__(
        self,
        layer_sizes: Sequence[int],
        activation: ActivationKind,
        hard_constraint: Optional[HardConstraint] = None,
        seed: int = 0,
    ) -> None:
        super().__init__()
        self.net = Mlp(layer_sizes, activation, generator=torch.Generator().manual_seed(seed))
        self.hard_constraint = hard_constraint

    def forward(self, xi: Tensor) -> Tensor:
        out = self.net(xi)[..., 0]
        return out if self.hard_constraint is None else self.hard_constraint(xi, out)


def train_pinn(
    problem: ProblemDef,
    v: Union[FunctionSample, ArrayLike],
    architecture: DeepONetConfig,
    spec: FineTuneSpec,
    *,
    reference: Optional[tuple[NDArray[np.float64], NDArray[np.float64]]] = None,
) -> FineTuneResult[PinnSurrogate]:
    """Train a network shaped like ``architecture``'s trunk on the physics loss of v only."""
    problem.check_activation(architecture.trunk_activation)
    sample = _as_sample(v)
    pinn = PinnSurrogate(architecture.trunk_layers[:-1] + [1], architecture.trunk_activation,
                         problem.hard_constraint, seed=spec.seed)
    colloc = make_collocation(problem, sample.grid, sample.values[None], n_domain=spec.n_domain,
                              n_boundary=spec.n_boundary, rng=np.random.default_rng(spec.seed))
    params = list(pinn.parameters())
    history = _adam_loop(
        params,
        lambda _: physics_loss(problem, pinn, colloc, spec.w_f, spec.w_b),
        spec,
        lambda: _reference_errors(pinn, sample, reference),
    )
    return FineTuneResult(pinn, history)
