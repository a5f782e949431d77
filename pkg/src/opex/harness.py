"""
harness.py – End-to-end experiments: sweeps, detection and repair comparisons.

Every runner takes an ExperimentConfig, fills unset fields from the scale
preset of its problem, and returns a ResultTable whose rows aggregate the
L2 relative error as mean ± std over test functions and seeds.

Runners
-------
  run_heatmap_sweep      error for every (l_train, l_test) pair, its W2
                         distance, and a power-law fit over Ex.+ cells
  run_capacity_sweep     In. and Ex.+ error against width, training
                         iterations, dataset size, activation or L-LAAF n
  run_repair_comparison  detect, then repair, every test function with
                         each configured method
  run_detection          mismatch errors and Ex.+ flag rate per l_test
  generate_datasets      seeded training and test sets for export

Determinism
-----------
Seeds for data, models and observations are derived from (seed, index)
with numpy SeedSequence, and per-function work fans out over a bounded
thread pool whose results are assembled in submission order.
"""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import reduce
from typing import Any, Optional

import numpy as np
import scipy.stats
import torch
from numpy.typing import NDArray

from .container import import_dataset, import_deeponet
from .dataset import OperatorDataset
from .deeponet import (
    DeepONet,
    build_deeponet,
    forward_at,
    function_errors,
    l2_relative_error,
    train,
    train_pideeponet,
)
from .errors import DegenerateFit
from .extrapolation import (
    calibrate_threshold,
    decide,
    ft_obs_alone,
    ft_obs_together,
    ft_phys,
    mismatch_obs,
    mismatch_phys,
    observe,
    train_pinn,
)
from .fields import FunctionSample
from .multifidelity import (
    gpr_fit,
    gpr_predict,
    mfgpr_fit,
    mfgpr_predict,
    mfnn_config,
    mfnn_fit,
    mfnn_predict,
)
from .nd_core import DTYPE
from .solvers import ProblemDef, external_problem, generate_dataset, problem_for
from .types import (
    ActivationKind,
    CapacityAxis,
    Decision,
    DeepONetConfig,
    ExperimentConfig,
    FineTuneSpec,
    GaussianFieldSpec,
    KernelKind,
    MismatchKind,
    Observations,
    OptimizerKind,
    Placement,
    PowerLawFit,
    ProblemKind,
    Regime,
    RepairMethod,
    ResultRow,
    ResultTable,
    Scale,
    ThresholdCalibration,
    TrainHistory,
)
from .wasserstein import fit_power_law, w2_distance

logger = logging.getLogger(__name__)

W2_GRID = np.linspace(0.0, 1.0, 101)


# ---------------------------------------------------------------------------
# Presets
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Preset:
    model:               DeepONetConfig
    lr:                  float
    iterations:          int
    n_train:             int
    n_test:              int
    ft_phys_iterations:  int
    ft_phys_lrs:         tuple[float, ...]
    ft_obs_a:            FineTuneSpec
    ft_obs_t_iterations: int
    mfnn_iterations:     int
    dense_points:        int     # low-fidelity set size for MFGPR/MFNN on 2D problems
    pideeponet_functions: int


_FULL_LRS = (0.01, 0.005, 0.002, 0.001, 0.0005, 0.0002, 0.0001)

_ANTIDERIVATIVE_NET = DeepONetConfig(query_dim=1, branch_depth=3, trunk_depth=3, branch_width=40,
                                     trunk_width=40, latent_width=40,
                                     trunk_activation=ActivationKind.TANH)


def _pde_net(width: int) -> DeepONetConfig:
    return DeepONetConfig(query_dim=2, branch_depth=3, trunk_depth=4, branch_width=width,
                          trunk_width=width, latent_width=width,
                          trunk_activation=ActivationKind.GELU)


_LBFGS_500 = FineTuneSpec(optimizer=OptimizerKind.LBFGS, iterations=500)
_ADAM_1000 = FineTuneSpec(optimizer=OptimizerKind.ADAM, lr=1e-3, iterations=1000)

_FT_PHYS_ITERATIONS = {
    ProblemKind.ANTIDERIVATIVE:     1000,
    ProblemKind.DIFFUSION_REACTION: 2000,
    ProblemKind.BURGERS:            5000,
    ProblemKind.ADVECTION:          5000,
    ProblemKind.EXTERNAL:           2000,
}


def _build_presets() -> dict[tuple[Scale, ProblemKind], Preset]:
    table: dict[tuple[Scale, ProblemKind], Preset] = {}
    for kind in ProblemKind:
        anti = kind is ProblemKind.ANTIDERIVATIVE
        table[(Scale.DESK, kind)] = Preset(
            model               = _ANTIDERIVATIVE_NET if anti else _pde_net(40),
            lr                  = 0.005 if anti else 0.001,
            iterations          = 20_000,
            n_train             = 300 if anti else 100,
            n_test              = 100,
            ft_phys_iterations  = _FT_PHYS_ITERATIONS[kind],
            ft_phys_lrs         = (0.002,),
            ft_obs_a            = _ADAM_1000 if anti else _LBFGS_500,
            ft_obs_t_iterations = 1000 if anti else 3000,
            mfnn_iterations     = 10_000,
            dense_points        = 2000,
            pideeponet_functions = 100,
        )
        table[(Scale.FULL, kind)] = Preset(
            model               = _ANTIDERIVATIVE_NET if anti else _pde_net(100),
            lr                  = 0.005 if anti else 0.001,
            iterations          = 50_000 if anti else 500_000,
            n_train             = 1000,
            n_test              = 100,
            ft_phys_iterations  = _FT_PHYS_ITERATIONS[kind],
            ft_phys_lrs         = _FULL_LRS,
            ft_obs_a            = _ADAM_1000 if anti else _LBFGS_500,
            ft_obs_t_iterations = 1000 if anti else 3000,
            mfnn_iterations     = 10_000,
            dense_points        = 10_201,
            pideeponet_functions = 1000,
        )
    return table


_PRESETS = _build_presets()


def preset_for(scale: Scale, kind: ProblemKind) -> Preset:
    """Unmodified preset for one scale and problem."""
    return _PRESETS[(scale, kind)]


def preset(config: ExperimentConfig) -> Preset:
    """Scale preset for the problem, with every field the config sets taking precedence."""
    base = preset_for(config.scale, config.problem)
    overrides: dict[str, Any] = {}
    if config.model is not None:
        overrides["model"] = config.model
    for name in ("n_train", "n_test", "iterations", "lr"):
        value = getattr(config, name)
        if value is not None:
            overrides[name] = value
    if config.ft_phys_lrs:
        overrides["ft_phys_lrs"] = tuple(config.ft_phys_lrs)
    if not overrides:
        return base
    return Preset(**{**base.__dict__, **overrides})


# ---------------------------------------------------------------------------
# Shared plumbing
# ---------------------------------------------------------------------------

def derive_seed(*keys: int) -> int:
    """Stable 32-bit seed from a tuple of non-negative integers."""
    return int(np.random.SeedSequence(list(keys)).generate_state(1)[0])


def config_problem(config: ExperimentConfig) -> ProblemDef:
    if config.problem is ProblemKind.EXTERNAL:
        return external_problem(config.model.query_dim if config.model else 2)
    return problem_for(config.problem)


def _spec(config: ExperimentConfig, length: float) -> GaussianFieldSpec:
    return config.field_spec.with_length(length)


def _new_table(config: ExperimentConfig) -> ResultTable:
    from . import __version__

    return ResultTable(config_hash=config.config_hash(), seeds=list(config.seeds),
                       version=f"opex {__version__}")


def _row(config: ExperimentConfig, method: str, setting: str, errors: list[float],
         runtime: float, metric: str = "l2_rel", **extras: float) -> ResultRow:
    arr = np.asarray(errors, dtype=np.float64)
    return ResultRow(method=method, setting=setting, metric=metric, mean=float(arr.mean()),
                     std=float(arr.std()), runtime_s=runtime, count=len(arr),
                     config_hash=config.config_hash(), extras=extras)


def train_model(
    config: ExperimentConfig,
    l_train: float,
    seed: int,
    *,
    settings: Optional[Preset] = None,
    test_sets: Optional[dict[str, OperatorDataset]] = None,
    log_every: int = 1000,
) -> tuple[DeepONet, OperatorDataset, TrainHistory]:
    """Generate the training set at ``l_train`` and train one DeepONet on it."""
    pre     = settings or preset(config)
    problem = config_problem(config)
    data    = generate_dataset(problem, _spec(config, l_train), pre.n_train,
                               derive_seed(seed, 0), workers=config.workers)
    model   = build_deeponet(pre.model.model_copy(update={"seed": seed}), problem)
    history = train(model, data, iterations=pre.iterations, lr=pre.lr, test_sets=test_sets,
                    log_every=log_every)
    return model, data, history


def _test_set(config: ExperimentConfig, problem: ProblemDef, l_test: float, seed: int,
              n: int) -> OperatorDataset:
    return generate_dataset(problem, _spec(config, l_test), n,
                            derive_seed(seed, 1, int(round(l_test * 1e6))), workers=config.workers)


def generate_datasets(config: ExperimentConfig, seed: int) -> dict[str, OperatorDataset]:
    """Training sets for every l_train and test sets for every l_test, keyed ``train_l=…``."""
    pre     = preset(config)
    problem = config_problem(config)
    if problem.solver is None:
        raise ValueError(f"problem {problem.kind.label} has no reference solver")
    out = {f"train_l={l:g}": generate_dataset(problem, _spec(config, l), pre.n_train,
                                              derive_seed(seed, 0), workers=config.workers)
           for l in config.l_train}
    for l in config.l_test:
        out[f"test_l={l:g}"] = _test_set(config, problem, l, seed, pre.n_test)
    return out


# ---------------------------------------------------------------------------
# Heatmap sweep
# ---------------------------------------------------------------------------

@dataclass
class HeatmapResult:
    table:    ResultTable
    pairs:    list[tuple[float, float]] = field(default_factory=list)   # (W2, error), Ex.+ cells
    fit:      Optional[PowerLawFit] = None
    spearman: Optional[float] = None


def run_heatmap_sweep(config: ExperimentConfig) -> HeatmapResult:
    """Train per l_train, test on every l_test, and relate Ex.+ error to W2."""
    pre     = preset(config)
    problem = config_problem(config)
    cells: dict[tuple[float, float], list[float]] = {}
    runtime: dict[float, float] = {}
    for seed in config.seeds:
        for l_train in config.l_train:
            start = time.perf_counter()
            model, _, _ = train_model(config, l_train, seed, settings=pre)
            runtime[l_train] = runtime.get(l_train, 0.0) + time.perf_counter() - start
            for l_test in config.l_test:
                test   = _test_set(config, problem, l_test, seed, pre.n_test)
                errors = function_errors(model, test)
                cells.setdefault((l_train, l_test), []).extend(errors.tolist())

    result = HeatmapResult(_new_table(config))
    for (l_train, l_test), errors in cells.items():
        w2 = w2_distance(_spec(config, l_train), _spec(config, l_test), W2_GRID)
        regime = Regime.classify(l_train, l_test)
        row = _row(config, "deeponet", f"l_train={l_train:g}|l_test={l_test:g}", errors,
                   runtime[l_train] / len(config.seeds), w2=w2, l_train=l_train,
                   l_test=l_test, regime=float(regime))
        result.table.add(row)
        if regime is Regime.EX_PLUS and w2 > 0 and row.mean > 0:
            result.pairs.append((w2, row.mean))

    if len(result.pairs) >= 3:
        try:
            result.fit = fit_power_law(result.pairs)
            w2s, errs = zip(*result.pairs)
            result.spearman = float(scipy.stats.spearmanr(np.log(w2s), np.log(errs)).statistic)
            logger.info("Ex.+ error ~ W2^%.2f (95%% CI [%.2f, %.2f]), Spearman %.3f",
                        result.fit.exponent, result.fit.ci_low, result.fit.ci_high,
                        result.spearman)
        except DegenerateFit as exc:
            logger.warning("Power-law fit skipped: %s", exc)
    return result


# ---------------------------------------------------------------------------
# Capacity sweep
# ---------------------------------------------------------------------------

def _with_setting(pre: Preset, axis: CapacityAxis, value: float) -> Preset:
    model = pre.model
    if axis is CapacityAxis.WIDTH:
        w = int(value)
        model = model.model_copy(update={"branch_width": w, "trunk_width": w, "latent_width": w})
    elif axis is CapacityAxis.ACTIVATION:
        model = model.model_copy(update={"trunk_activation": ActivationKind(int(value))})
    elif axis is CapacityAxis.LAAF_SCALE:
        model = model.model_copy(update={"laaf_scale": float(value)})
    elif axis is CapacityAxis.DATASET_SIZE:
        return Preset(**{**pre.__dict__, "n_train": int(value)})
    return Preset(**{**pre.__dict__, "model": model})


def _setting_label(axis: CapacityAxis, value: float) -> str:
    if axis is CapacityAxis.ACTIVATION:
        return f"{axis.label}={ActivationKind(int(value)).label}"
    return f"{axis.label}={value:g}"


def run_capacity_sweep(config: ExperimentConfig) -> ResultTable:
    """
    In. and Ex.+ errors per setting of ``config.capacity_axis``.

    The iterations axis trains once per seed up to the largest checkpoint
    and reads the logged test errors at each requested iteration.
    """
    values = list(config.capacity_values)
    if len(values) < 2:
        raise ValueError("a capacity sweep needs at least two settings")
    axis    = config.capacity_axis
    pre     = preset(config)
    problem = config_problem(config)
    l_train, l_test = config.l_train[0], config.l_test[0]
    errors: dict[tuple[str, str], list[float]] = {}
    runtime: dict[str, float] = {}

    for seed in config.seeds:
        tests = {"in": _test_set(config, problem, l_train, seed, pre.n_test),
                 "ex+": _test_set(config, problem, l_test, seed, pre.n_test)}
        if axis is CapacityAxis.ITERATIONS:
            checkpoints = [int(v) for v in values]
            settings = Preset(**{**pre.__dict__, "iterations": max(checkpoints)})
            start = time.perf_counter()
            _, _, history = train_model(config, l_train, seed, settings=settings, test_sets=tests,
                                        log_every=reduce(math.gcd, checkpoints))
            elapsed = time.perf_counter() - start
            for it in checkpoints:
                label = _setting_label(axis, it)
                idx   = history.iterations.index(it)
                for regime in tests:
                    errors.setdefault((label, regime), []).append(history.test_errors[regime][idx])
                runtime[label] = runtime.get(label, 0.0) + elapsed
            continue
        for value in values:
            label = _setting_label(axis, value)
            start = time.perf_counter()
            model, _, _ = train_model(config, l_train, seed,
                                      settings=_with_setting(pre, axis, value))
            runtime[label] = runtime.get(label, 0.0) + time.perf_counter() - start
            for regime, data in tests.items():
                errors.setdefault((label, regime), []).extend(function_errors(model, data).tolist())

    table = _new_table(config)
    for (label, regime), errs in errors.items():
        table.add(_row(config, "deeponet", label, errs, runtime[label] / len(config.seeds),
                       metric=f"l2_rel_{regime}"))
    return table


# ---------------------------------------------------------------------------
# Repair comparison
# ---------------------------------------------------------------------------

@dataclass
class _RepairContext:
    config:       ExperimentConfig
    pre:          Preset
    problem:      ProblemDef
    model:        DeepONet
    trainset:     Optional[OperatorDataset]
    calibrations: dict[MismatchKind, ThresholdCalibration]
    pideeponet:   Optional[DeepONet]
    seed:         int


@dataclass(frozen=True)
class _Trial:
    method:  str
    suffix:  str              # setting detail after l_test, e.g. "|subset=trunk|lr=0.002"
    noise:   Optional[float]  # None for methods that use no observations
    error:   float
    runtime: float


@dataclass
class _FunctionOutcome:
    trials:    list[_Trial] = field(default_factory=list)
    decisions: dict[float, Decision] = field(default_factory=dict)   # noise level → decision


def _deeponet_on(
    model: DeepONet, v: FunctionSample, points: NDArray[np.float64]
) -> NDArray[np.float64]:
    with torch.no_grad():
        return forward_at(model, v, points).numpy()


def _module_on(module: torch.nn.Module, points: NDArray[np.float64]) -> NDArray[np.float64]:
    with torch.no_grad():
        return module(torch.as_tensor(points, dtype=DTYPE)).numpy()


def _gp_kernel(config: ExperimentConfig) -> KernelKind:
    return KernelKind.MATERN15 if config.kernel is KernelKind.MATERN15 else KernelKind.RBF


def low_fidelity_points(
    points: NDArray[np.float64], limit: int, seed: int
) -> NDArray[np.float64]:
    """Low-fidelity locations for MFGPR/MFNN: the whole grid in 1D, a uniform subsample in 2D."""
    if points.shape[1] == 1 or len(points) <= limit:
        return points
    idx = np.sort(np.random.default_rng(seed).choice(len(points), limit, replace=False))
    return points[idx]


def _repairs(
    ctx: _RepairContext,
    method: RepairMethod,
    v: FunctionSample,
    points: NDArray[np.float64],
    obs: Optional[Observations],
    seed: int,
) -> list[tuple[str, NDArray[np.float64]]]:
    """Predictions on ``points`` for each variant of ``method``, keyed by a setting suffix."""
    config, pre, problem = ctx.config, ctx.pre, ctx.problem
    if method is RepairMethod.FROZEN:
        return [("", _deeponet_on(ctx.model, v, points))]
    if method is RepairMethod.PIDEEPONET:
        assert ctx.pideeponet is not None
        return [("", _deeponet_on(ctx.pideeponet, v, points))]
    if method is RepairMethod.PINN:
        spec = FineTuneSpec(lr=pre.ft_phys_lrs[0], iterations=pre.ft_phys_iterations, seed=seed)
        return [("", _module_on(train_pinn(problem, v, ctx.model.config, spec).model, points))]
    if method is RepairMethod.FT_PHYS:
        out = []
        for subset in config.ft_subsets:
            for lr in pre.ft_phys_lrs:
                spec  = FineTuneSpec(subset=subset, lr=lr, iterations=pre.ft_phys_iterations,
                                     seed=seed)
                tuned = ft_phys(ctx.model, v, problem, spec).model
                out.append((f"|subset={subset.label}|lr={lr:g}",
                            _deeponet_on(tuned, v, points)))
        return out

    assert obs is not None
    locs  = np.asarray(obs.locations, dtype=np.float64)
    noise = None if obs.noise_level > 0 else 1e-10
    if method is RepairMethod.FT_OBS_A:
        spec = pre.ft_obs_a.model_copy(update={"seed": seed})
        return [("", _deeponet_on(ft_obs_alone(ctx.model, v, obs, spec).model, v, points))]
    if method is RepairMethod.FT_OBS_T:
        if ctx.trainset is None:
            raise ValueError("FT-Obs-T needs the original training set")
        spec = FineTuneSpec(lr=1e-3, iterations=pre.ft_obs_t_iterations, lam=config.obs_lambda,
                            initial_lambda=config.initial_lambda,
                            adaptive_lambda=config.adaptive_lambda, seed=seed)
        tuned = ft_obs_together(ctx.model, v, obs, ctx.trainset, spec).model
        return [("", _deeponet_on(tuned, v, points))]
    if method is RepairMethod.GPR:
        gp = gpr_fit(locs, obs.values, _gp_kernel(config), noise=noise, seed=seed)
        return [("", gpr_predict(gp, points)[0])]
    low_x = low_fidelity_points(points, pre.dense_points, seed)
    low_y = _deeponet_on(ctx.model, v, low_x)
    if method is RepairMethod.MFGPR:
        mf = mfgpr_fit(low_x, low_y, locs, obs.values, _gp_kernel(config), noise=noise, seed=seed)
        return [("", mfgpr_predict(mf, points))]
    cfg = mfnn_config(problem.kind, obs.count, seed).model_copy(
        update={"iterations": pre.mfnn_iterations})
    net, _ = mfnn_fit(low_x, low_y, locs, obs.values, cfg)
    return [("", mfnn_predict(net, points))]


def _detect(ctx: _RepairContext, v: FunctionSample, obs: Observations) -> Optional[Decision]:
    if not ctx.calibrations:
        return None
    e_phys = (mismatch_phys(ctx.model, v, ctx.problem)
              if MismatchKind.PHYS in ctx.calibrations else None)
    e_obs  = mismatch_obs(ctx.model, v, obs) if MismatchKind.OBS in ctx.calibrations else None
    return decide(ctx.calibrations, e_phys=e_phys, e_obs=e_obs).decision


def _repair_function(
    ctx: _RepairContext, data: OperatorDataset, l_index: int, i: int
) -> _FunctionOutcome:
    config  = ctx.config
    v       = FunctionSample(data.sensors, data.branch_inputs[i])
    points  = data.queries_for(i)
    target  = data.targets[i]
    seed    = derive_seed(ctx.seed, 3, l_index, i)
    fixed   = config.fixed_locations if config.placement is Placement.FIXED_LIST else None
    outcome = _FunctionOutcome()

    def run(method: RepairMethod, obs: Optional[Observations]) -> None:
        start = time.perf_counter()
        preds = _repairs(ctx, method, v, points, obs, seed)
        elapsed = (time.perf_counter() - start) / len(preds)
        noise = None if obs is None else obs.noise_level
        for suffix, pred in preds:
            outcome.trials.append(_Trial(method.label, suffix, noise,
                                         l2_relative_error(pred, target), elapsed))

    for method in config.methods:
        if not method.needs_observations:
            run(method, None)
    for level in config.noise_levels:
        # the same seed per level keeps locations fixed across a noise sweep
        obs = observe(points, target, config.n_obs, np.random.default_rng(seed),
                      noise_level=level, fixed_locations=fixed)
        decision = _detect(ctx, v, obs)
        if decision is not None:
            outcome.decisions[level] = decision
        for method in config.methods:
            if method.needs_observations:
                run(method, obs)
    return outcome


def pretrained_model(
    config: ExperimentConfig, pre: Preset, problem: ProblemDef, seed: int
) -> tuple[DeepONet, Optional[OperatorDataset], Optional[TrainHistory]]:
    """
    The model repairs start from: the configured checkpoint, or a fresh
    model trained on the configured dataset, or one trained on generated
    data at the first l_train.  The training set comes back whenever it is
    known or FT-Obs-T needs it, and the history whenever training ran here.
    """
    trainset = import_dataset(config.dataset) if config.dataset else None
    if config.checkpoint:
        model = import_deeponet(config.checkpoint)
        if trainset is None and RepairMethod.FT_OBS_T in config.methods:
            trainset = generate_dataset(problem, _spec(config, config.l_train[0]), pre.n_train,
                                        derive_seed(seed, 0), workers=config.workers)
        return model, trainset, None
    if trainset is not None:
        model   = build_deeponet(pre.model.model_copy(update={"seed": seed}), problem)
        history = train(model, trainset, iterations=pre.iterations, lr=pre.lr)
        return model, trainset, history
    return train_model(config, config.l_train[0], seed, settings=pre)


def calibrate_detectors(
    config: ExperimentConfig, model: DeepONet, problem: ProblemDef, seed: int
) -> dict[MismatchKind, ThresholdCalibration]:
    """OBS threshold always; PHYS too when the trunk activation can carry the residual."""
    if problem.solver is None:
        return {}
    spec = _spec(config, config.l_train[0])
    out = {MismatchKind.OBS: calibrate_threshold(
        model, problem, spec, config.alpha, config.n_validation, derive_seed(seed, 2),
        mode=MismatchKind.OBS, n_obs=config.n_obs)}
    if not problem.second_order or model.config.trunk_activation.smooth:
        out[MismatchKind.PHYS] = calibrate_threshold(
            model, problem, spec, config.alpha, config.n_validation, derive_seed(seed, 2))
    return out


def run_repair_comparison(config: ExperimentConfig) -> ResultTable:
    """
    Detect and repair every test function with every configured method.

    Rows are keyed by method and setting ``l_test=…`` (plus ``|subset=…|lr=…``
    for FT-Phys and ``|noise=…`` for observation-based methods).  Each row
    carries the W2 distance of its test space and the fraction of test
    functions the detector flagged as Ex.+.
    """
    pre     = preset(config)
    problem = config_problem(config)
    if problem.solver is None:
        raise ValueError(f"problem {problem.kind.label} has no reference solver for test sets")
    cells: dict[tuple[str, str], list[tuple[float, float]]] = {}
    cell_key: dict[tuple[str, str], tuple[float, float]] = {}   # → (l_test, noise level)
    flags: dict[tuple[float, float], list[bool]] = {}

    for seed in config.seeds:
        model, trainset, _ = pretrained_model(config, pre, problem, seed)
        pideeponet = None
        if RepairMethod.PIDEEPONET in config.methods:
            pideeponet, _ = train_pideeponet(
                model.config, problem, _spec(config, config.l_train[0]),
                pre.pideeponet_functions, pre.iterations, lr=pre.lr, seed=derive_seed(seed, 4))
        calibrations = calibrate_detectors(config, model, problem, seed)
        ctx = _RepairContext(config, pre, problem, model, trainset, calibrations, pideeponet, seed)

        for l_index, l_test in enumerate(config.l_test):
            data = _test_set(config, problem, l_test, seed, pre.n_test)
            with ThreadPoolExecutor(max_workers=config.workers) as pool:
                outcomes = list(pool.map(lambda i: _repair_function(ctx, data, l_index, i),
                                         range(len(data))))
            for outcome in outcomes:
                for trial in outcome.trials:
                    setting = f"l_test={l_test:g}{trial.suffix}"
                    if trial.noise is not None:
                        setting += f"|noise={trial.noise:g}"
                    key = (trial.method, setting)
                    cells.setdefault(key, []).append((trial.error, trial.runtime))
                    level = config.noise_levels[0] if trial.noise is None else trial.noise
                    cell_key[key] = (l_test, level)
                for level, decision in outcome.decisions.items():
                    flags.setdefault((l_test, level), []).append(decision is Decision.EX_PLUS)
            logger.info("Seed %d, l_test=%g: %d functions repaired", seed, l_test, len(data))

    table = _new_table(config)
    train_spec = _spec(config, config.l_train[0])
    for (method, setting), values in cells.items():
        l_test, level = cell_key[(method, setting)]
        errs, times   = zip(*values)
        extras: dict[str, float] = {"w2": w2_distance(train_spec, _spec(config, l_test), W2_GRID)}
        flagged = flags.get((l_test, level), [])
        if flagged:
            extras["ex_plus_rate"] = float(np.mean(flagged))
        table.add(_row(config, method, setting, list(errs), float(np.mean(times)), **extras))
    return table


# ---------------------------------------------------------------------------
# Detection
# ---------------------------------------------------------------------------

def run_detection(config: ExperimentConfig) -> ResultTable:
    """
    Mismatch errors and the Ex.+ flag rate of the detector for every l_test.

    Rows use method ``detector`` with metrics ``e_phys``, ``e_obs`` and
    ``ex_plus_rate``; the calibrated baselines ride along as extras.
    """
    pre     = preset(config)
    problem = config_problem(config)
    if problem.solver is None:
        raise ValueError(f"problem {problem.kind.label} has no reference solver for test sets")
    fixed = config.fixed_locations if config.placement is Placement.FIXED_LIST else None
    level = config.noise_levels[0]
    values: dict[tuple[float, str], list[float]] = {}
    baselines: dict[str, list[float]] = {}
    runtime: dict[float, float] = {}

    for seed in config.seeds:
        model, _, _  = pretrained_model(config, pre, problem, seed)
        calibrations = calibrate_detectors(config, model, problem, seed)
        for kind, cal in calibrations.items():
            baselines.setdefault(f"eps0_{kind.name.lower()}", []).append(cal.eps0)
        for l_index, l_test in enumerate(config.l_test):
            data  = _test_set(config, problem, l_test, seed, pre.n_test)
            start = time.perf_counter()
            for i in range(len(data)):
                v   = FunctionSample(data.sensors, data.branch_inputs[i])
                rng = np.random.default_rng(derive_seed(seed, 3, l_index, i))
                obs = observe(data.queries_for(i), data.targets[i], config.n_obs, rng,
                              noise_level=level, fixed_locations=fixed)
                e_phys = (mismatch_phys(model, v, problem)
                          if MismatchKind.PHYS in calibrations else None)
                e_obs  = mismatch_obs(model, v, obs)
                report = decide(calibrations, e_phys=e_phys, e_obs=e_obs)
                if e_phys is not None:
                    values.setdefault((l_test, "e_phys"), []).append(e_phys)
                values.setdefault((l_test, "e_obs"), []).append(e_obs)
                values.setdefault((l_test, "ex_plus_rate"), []).append(
                    float(report.is_extrapolation))
            runtime[l_test] = runtime.get(l_test, 0.0) + time.perf_counter() - start

    table = _new_table(config)
    extras = {name: float(np.mean(v)) for name, v in baselines.items()}
    train_spec = _spec(config, config.l_train[0])
    for (l_test, metric), errs in values.items():
        w2 = w2_distance(train_spec, _spec(config, l_test), W2_GRID)
        table.add(_row(config, "detector", f"l_test={l_test:g}", errs,
                       runtime[l_test] / len(config.seeds), metric=metric, w2=w2, **extras))
    return table
