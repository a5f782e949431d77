"""
deeponet.py – DeepONet model, training and evaluation.

    G(v)(ξ) = Σ_k b_k(v) · t_k(ξ) + b0

The branch net encodes v at m sensors, the trunk net encodes the query
point ξ, and an optional hard-constraint transform of the owning problem
is applied to the result (u = x · G for the antiderivative, so u(0) = 0).

Training is full-batch Adam on the mean squared error over every
(function, query) pair.  PIDeepONet training replaces the data loss by the
physics loss of the problem over a sampled set of input functions.

Usage
-----
    problem = problem_for(ProblemKind.ANTIDERIVATIVE)
    model   = build_deeponet(DeepONetConfig(), problem)
    history = train(model, trainset, iterations=20_000, test_sets={"ex+": testset})
"""

from __future__ import annotations

import copy
import logging
import math
from typing import Mapping, Optional, Union

import numpy as np
import torch
from numpy.typing import ArrayLike, NDArray
from torch import Tensor, nn

from .dataset import OperatorDataset
from .errors import DimensionMismatch, NonFiniteLoss, ZeroReference
from .fields import FunctionSample, sample_values, sensor_grid
from .nd_core import DTYPE, Mlp, adam_step, make_adam, param_grad
from .solvers import FieldFn, HardConstraint, ProblemDef, make_collocation, physics_loss
from .types import DeepONetConfig, GaussianFieldSpec, ProblemKind, TrainHistory

logger = logging.getLogger(__name__)

_LOG_EVERY = 1000


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------

class DeepONet(nn.Module):
    """
    Unstacked DeepONet with a scalar output bias.

    Parameters
    ----------
    config          : architecture and initialisation seed
    hard_constraint : (ξ, raw output) → constrained output, or None
    problem_kind    : recorded so checkpoints can re-attach the constraint
    """

    def __init__(
        self,
        config: DeepONetConfig,
        hard_constraint: Optional[HardConstraint] = None,
        problem_kind: ProblemKind = ProblemKind.EXTERNAL,
    ) -> None:
        super().__init__()
        generator = torch.Generator().manual_seed(config.seed)
        self.config          = config.model_copy()
        self.hard_constraint = hard_constraint
        self.problem_kind    = problem_kind
        self.branch = Mlp(config.branch_layers, config.branch_activation,
                          laaf_scale=config.branch_laaf_scale, generator=generator)
        self.trunk  = Mlp(config.trunk_layers, config.trunk_activation, final_activation=True,
                          laaf_scale=config.laaf_scale, generator=generator)
        self.b0     = nn.Parameter(torch.zeros((), dtype=DTYPE))

    def forward(self, v: Tensor, xi: Tensor) -> Tensor:
        """
        v  : (B, m) sensor values
        xi : (Q, d) shared query points or (B, Q, d) per-function points
        returns (B, Q)
        """
        b = self.branch(v)
        t = self.trunk(xi)
        if xi.dim() == 2:
            out = b @ t.T
        else:
            out = torch.einsum("bp,bqp->bq", b, t)
        out = out + self.b0
        if self.hard_constraint is not None:
            out = self.hard_constraint(xi, out)
        return out

    def field_fn(self, v_values: ArrayLike) -> FieldFn:
        """Closure ξ (B, Q, d) → u (B, Q) with the branch input fixed."""
        v = torch.as_tensor(np.atleast_2d(np.asarray(v_values, dtype=np.float64)), dtype=DTYPE)
        return lambda xi: self(v, xi)


def build_deeponet(config: DeepONetConfig, problem: Optional[ProblemDef] = None) -> DeepONet:
    if problem is None:
        return DeepONet(config)
    if config.query_dim != problem.query_dim:
        raise DimensionMismatch(problem.query_dim, config.query_dim, "trunk input dimension")
    return DeepONet(config, problem.hard_constraint, problem.kind)


def clone_model(model: DeepONet) -> DeepONet:
    return copy.deepcopy(model)


def _sensor_values(v: Union[FunctionSample, ArrayLike]) -> NDArray[np.float64]:
    return v.values if isinstance(v, FunctionSample) else np.asarray(v, dtype=np.float64)


def forward_at(model: DeepONet, v: Union[FunctionSample, ArrayLike], points: ArrayLike) -> Tensor:
    """Model output for one input function at (N, d) points, on the autograd graph."""
    values = _sensor_values(v)
    if values.shape != (model.config.sensor_count,):
        raise DimensionMismatch(model.config.sensor_count, values.shape, "sensor values")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, model.config.query_dim)
    return model(torch.as_tensor(values[None], dtype=DTYPE), torch.as_tensor(pts, dtype=DTYPE))[0]


def predict(
    model: DeepONet,
    v: Union[FunctionSample, ArrayLike],
    xi: ArrayLike,
) -> Union[float, NDArray[np.float64]]:
    """Σ b_k t_k + b0 (constrained).  A single point gives a float, (N, d) points an array."""
    d   = model.config.query_dim
    pts = np.asarray(xi, dtype=np.float64)
    single = pts.ndim <= 1
    if (single and pts.size != d) or (not single and (pts.ndim != 2 or pts.shape[1] != d)):
        raise DimensionMismatch(d, pts.shape, "query points")
    with torch.no_grad():
        out = forward_at(model, v, pts).numpy()
    return float(out[0]) if single else out


# ---------------------------------------------------------------------------
# Errors
# ---------------------------------------------------------------------------

def l2_relative_error(pred: ArrayLike, true: ArrayLike) -> float:
    """‖pred − true‖₂ / ‖true‖₂."""
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(true, dtype=np.float64)
    if p.shape != t.shape:
        raise DimensionMismatch(t.shape, p.shape, "prediction")
    ref = float(np.linalg.norm(t))
    if ref == 0.0:
        raise ZeroReference()
    return float(np.linalg.norm(p - t)) / ref


def dataset_predictions(model: DeepONet, dataset: OperatorDataset) -> NDArray[np.float64]:
    with torch.no_grad():
        out = model(torch.as_tensor(dataset.branch_inputs, dtype=DTYPE),
                    torch.as_tensor(dataset.queries, dtype=DTYPE))
    return out.numpy()


def function_errors(model: DeepONet, dataset: OperatorDataset) -> NDArray[np.float64]:
    """L2 relative error of every function in ``dataset``."""
    preds = dataset_predictions(model, dataset)
    return np.array([l2_relative_error(p, t) for p, t in zip(preds, dataset.targets)])


def mean_error(model: DeepONet, dataset: OperatorDataset) -> float:
    return float(np.mean(function_errors(model, dataset)))


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def _data_loss_and_grads(
    model: DeepONet,
    params: list[nn.Parameter],
    v: Tensor,
    xi: Tensor,
    y: Tensor,
    chunk_size: Optional[int],
) -> tuple[float, list[Tensor]]:
    if chunk_size is None or chunk_size >= v.shape[0]:
        loss = torch.mean((model(v, xi) - y) ** 2)
        return float(loss), param_grad(loss, params)
    total = float(y.numel())
    value = 0.0
    grads = [torch.zeros_like(p) for p in params]
    for start in range(0, v.shape[0], chunk_size):
        stop  = start + chunk_size
        q     = xi if xi.dim() == 2 else xi[start:stop]
        part  = torch.sum((model(v[start:stop], q) - y[start:stop]) ** 2) / total
        value += float(part)
        grads = [g + c for g, c in zip(grads, param_grad(part, params))]
    return value, grads


def train(
    model: DeepONet,
    dataset: OperatorDataset,
    *,
    iterations: int,
    lr: float = 1e-3,
    test_sets: Optional[Mapping[str, OperatorDataset]] = None,
    log_every: int = _LOG_EVERY,
    chunk_size: Optional[int] = None,
) -> TrainHistory:
    """
    Full-batch Adam on the data MSE.

    The history holds the loss (and mean L2 relative error of each labelled
    test set) before the first update and every ``log_every`` updates
    after it, plus the final state.  With ``chunk_size`` the gradient is
    accumulated over consecutive chunks of functions in a fixed order.
    """
    if iterations < 1:
        raise ValueError(f"iterations must be >= 1, got {iterations}")
    if dataset.sensor_count != model.config.sensor_count:
        raise DimensionMismatch(model.config.sensor_count, dataset.sensor_count, "sensor count")
    params  = [p for p in model.parameters() if p.requires_grad]
    opt     = make_adam(params, lr)
    v       = torch.as_tensor(dataset.branch_inputs, dtype=DTYPE)
    xi      = torch.as_tensor(dataset.queries, dtype=DTYPE)
    y       = torch.as_tensor(dataset.targets, dtype=DTYPE)
    history = TrainHistory()

    for it in range(iterations + 1):
        loss, grads = _data_loss_and_grads(model, params, v, xi, y, chunk_size)
        if not math.isfinite(loss):
            raise NonFiniteLoss(it, history)
        if it % log_every == 0 or it == iterations:
            errors = {label: mean_error(model, ds) for label, ds in (test_sets or {}).items()}
            history.record(it, loss, errors)
            logger.debug("iter %d  loss=%.3e  %s", it, loss, errors)
        if it == iterations:
            break
        adam_step(opt, params, grads)

    logger.info("Trained DeepONet for %d iterations, final loss %.3e",
                iterations, history.train_loss[-1])
    return history


def train_pideeponet(
    config: DeepONetConfig,
    problem: ProblemDef,
    field_spec: GaussianFieldSpec,
    n_functions: int,
    iterations: int,
    *,
    lr: float = 1e-3,
    w_f: float = 1.0,
    w_b: float = 1.0,
    n_domain: int = 500,
    n_boundary: int = 100,
    seed: int = 0,
    log_every: int = _LOG_EVERY,
) -> tuple[DeepONet, TrainHistory]:
    """
    Physics-informed DeepONet: no solution data, only F and B residuals
    averaged over ``n_functions`` input functions drawn from ``field_spec``.
    """
    problem.check_activation(config.trunk_activation)
    if n_functions < 1 or iterations < 1:
        raise ValueError("n_functions and iterations must be >= 1")
    model    = build_deeponet(config, problem)
    rng      = np.random.default_rng(seed)
    sensors  = sensor_grid(config.sensor_count)
    raw      = sample_values(field_spec, sensors, n_functions, rng)
    v_values = np.stack([problem.prepare(FunctionSample(sensors, row)).values for row in raw])
    colloc   = make_collocation(problem, sensors, v_values, n_domain=n_domain,
                                n_boundary=n_boundary, rng=rng)
    fn       = model.field_fn(v_values)
    params   = [p for p in model.parameters() if p.requires_grad]
    opt      = make_adam(params, lr)
    history  = TrainHistory()

    for it in range(iterations + 1):
        loss  = physics_loss(problem, fn, colloc, w_f, w_b)
        value = float(loss)
        if not math.isfinite(value):
            raise NonFiniteLoss(it, history)
        if it % log_every == 0 or it == iterations:
            history.record(it, value)
        if it == iterations:
            break
        adam_step(opt, params, param_grad(loss, params))

    logger.info("Trained PIDeepONet (%s) for %d iterations, physics loss %.3e",
                problem.kind.label, iterations, history.train_loss[-1])
    return model, history
