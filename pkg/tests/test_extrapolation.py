"""
tests/test_extrapolation.py – Mismatch detection and fine-tuning.

They verify that:
  1. Observations pick distinct grid points (or the nearest ones to fixed
     locations), are reproducible per generator and add noise only when
     asked.
  2. RRSE and the physics mismatch have their closed forms and vanish on
     exact surrogates.
  3. Threshold calibration averages per-function mismatches and the
     decision rule compares the larger baseline ratio against α·ε0, with
     ties going to the physics mismatch.
  4. FT-Phys, FT-Obs-A, FT-Obs-T and the PINN baseline lower their losses,
     leave the pre-trained model untouched and only move the selected
     parameter subset.
"""

from __future__ import annotations

import numpy as np
import pytest
import torch

from opex.dataset import OperatorDataset
from opex.deeponet import build_deeponet, dataset_predictions
from opex.errors import UnsupportedActivationOrder, ZeroReference
from opex.extrapolation import (
    FineTuneResult,
    PinnSurrogate,
    calibrate_threshold,
    decide,
    ft_obs_alone,
    ft_obs_together,
    ft_phys,
    mismatch_obs,
    mismatch_phys,
    observe,
    rrse,
    subset_parameters,
    train_pinn,
)
from opex.fields import FunctionSample, sensor_grid
from opex.nd_core import DTYPE
from opex.solvers import generate_dataset, problem_for
from opex.types import (
    ActivationKind,
    Decision,
    DeepONetConfig,
    FineTuneSpec,
    GaussianFieldSpec,
    MismatchKind,
    OptimizerKind,
    ParamSubset,
    ProblemKind,
    ThresholdCalibration,
)

M = 10
ANTIDERIVATIVE = problem_for(ProblemKind.ANTIDERIVATIVE)


def _config(**kwargs) -> DeepONetConfig:
    defaults = dict(sensor_count=M, branch_depth=2, branch_width=16, trunk_depth=2,
                    trunk_width=16, latent_width=16, seed=0)
    return DeepONetConfig(**{**defaults, **kwargs})


def _model():
    return build_deeponet(_config(), ANTIDERIVATIVE)


def _spec(**kwargs) -> FineTuneSpec:
    defaults = dict(iterations=30, lr=5e-3, n_domain=20, n_boundary=1, log_every=10)
    return FineTuneSpec(**{**defaults, **kwargs})


def _dataset(n: int = 1, seed: int = 5, length: float = 0.2) -> OperatorDataset:
    return generate_dataset(ANTIDERIVATIVE, GaussianFieldSpec(length_scale=length), n=n,
                            seed=seed, sensors=sensor_grid(M))


def _case(rng: np.random.Generator, n_obs: int = 5):
    data = _dataset()
    v = FunctionSample(data.sensors, data.branch_inputs[0])
    obs = observe(data.queries, data.targets[0], n_obs, rng)
    return data, v, obs


def _cal(kind: MismatchKind, eps0: float, alpha: float = 1.5) -> ThresholdCalibration:
    return ThresholdCalibration(mode=kind, eps0=eps0, alpha=alpha, n_validation=1)


def _params_equal(a, b) -> bool:
    return all(torch.equal(x, y) for x, y in zip(a, b))


# ---------------------------------------------------------------------------
# Observations and RRSE
# ---------------------------------------------------------------------------

class TestObserve:
    def test_distinct_sorted_locations(self, rng: np.random.Generator) -> None:
        pts = np.linspace(0, 1, 11).reshape(-1, 1)
        obs = observe(pts, pts[:, 0] ** 2, 6, rng)
        xs = [p[0] for p in obs.locations]
        assert obs.count == 6 and obs.dim == 1
        assert xs == sorted(set(xs))
        assert obs.values == pytest.approx([x * x for x in xs])

    def test_reproducible(self) -> None:
        pts = np.linspace(0, 1, 11)
        a = observe(pts, pts, 4, np.random.default_rng(3), noise_level=0.1)
        b = observe(pts, pts, 4, np.random.default_rng(3), noise_level=0.1)
        assert a == b

    def test_fixed_locations_snap_to_grid(self, rng: np.random.Generator) -> None:
        pts = np.linspace(0, 1, 11)
        obs = observe(pts, 2.0 * pts, 0, rng, fixed_locations=[[0.31], [0.88]])
        assert np.allclose(obs.locations, [[0.3], [0.9]])
        assert obs.values == pytest.approx([0.6, 1.8])

    def test_two_dimensional_points(self, rng: np.random.Generator) -> None:
        pts = problem_for(ProblemKind.BURGERS).quadrature_grid(5, 4)
        obs = observe(pts, pts[:, 0] + pts[:, 1], 3, rng)
        assert obs.dim == 2
        assert all(v == pytest.approx(sum(p)) for p, v in zip(obs.locations, obs.values))

    def test_noise(self, rng: np.random.Generator) -> None:
        pts = np.linspace(0, 1, 200)
        values = np.ones(200)
        obs = observe(pts, values, 200, rng, noise_level=0.1)
        noise = np.asarray(obs.values) - 1.0
        assert obs.noise_level == 0.1
        assert 0.08 < float(np.std(noise)) < 0.12

    @pytest.mark.parametrize("n_obs", [0, 12])
    def test_count_out_of_range(self, n_obs: int, rng: np.random.Generator) -> None:
        pts = np.linspace(0, 1, 11)
        with pytest.raises(ValueError, match="n_obs"):
            observe(pts, pts, n_obs, rng)


class TestRrse:
    def test_closed_form(self) -> None:
        assert rrse([1.0, 1.0], [1.0, 2.0]) == pytest.approx(np.sqrt(1.0 / 5.0))

    def test_exact(self) -> None:
        assert rrse([1.0, -2.0], [1.0, -2.0]) == 0.0

    def test_zero_reference(self) -> None:
        with pytest.raises(ZeroReference):
            rrse([1.0, 2.0], [0.0, 0.0])


# ---------------------------------------------------------------------------
# Mismatch errors
# ---------------------------------------------------------------------------

class TestMismatchPhys:
    def test_exact_surrogate(self) -> None:
        v = FunctionSample(sensor_grid(), 2.0 * sensor_grid())
        assert mismatch_phys(lambda p: p[..., 0] ** 2, v, ANTIDERIVATIVE) < 1e-10

    def test_constant_defect(self) -> None:
        v = FunctionSample(sensor_grid(), 2.0 * sensor_grid() + 1.0)
        assert mismatch_phys(lambda p: p[..., 0] ** 2, v, ANTIDERIVATIVE) == pytest.approx(1.0)

    def test_custom_grid(self) -> None:
        v = np.zeros(100)
        err = mismatch_phys(lambda p: 3.0 * p[..., 0], v, ANTIDERIVATIVE,
                            grid=np.array([[0.2], [0.7]]))
        assert err == pytest.approx(3.0)

    def test_deeponet_is_positive(self, rng: np.random.Generator) -> None:
        assert mismatch_phys(_model(), rng.standard_normal(M), ANTIDERIVATIVE) > 0.0

    def test_relu_trunk_rejected_for_second_order(self) -> None:
        model = build_deeponet(_config(query_dim=2, trunk_activation=ActivationKind.RELU))
        with pytest.raises(UnsupportedActivationOrder):
            mismatch_phys(model, np.zeros(M), problem_for(ProblemKind.DIFFUSION_REACTION))


class TestMismatchObs:
    def test_exact_surrogate(self, rng: np.random.Generator) -> None:
        pts = np.linspace(0, 1, 11)
        obs = observe(pts, np.sin(pts) + 1.0, 4, rng)
        assert mismatch_obs(lambda p: torch.sin(p[..., 0]) + 1.0, np.zeros(5), obs) < 1e-12

    def test_deeponet_against_its_own_predictions(self, rng: np.random.Generator) -> None:
        model = _model()
        data = _dataset()
        preds = dataset_predictions(model, data)[0]
        obs = observe(data.queries, preds, 5, rng, fixed_locations=[[0.2], [0.5], [0.9]])
        assert mismatch_obs(model, data.branch_inputs[0], obs) < 1e-12


# ---------------------------------------------------------------------------
# Calibration and decisions
# ---------------------------------------------------------------------------

class TestCalibration:
    def test_phys_mean_of_samples(self) -> None:
        cal = calibrate_threshold(_model(), ANTIDERIVATIVE, GaussianFieldSpec(length_scale=0.5),
                                  alpha=2.0, n_validation=5, seed=1)
        assert cal.mode is MismatchKind.PHYS
        assert len(cal.samples) == 5
        assert cal.eps0 == pytest.approx(float(np.mean(cal.samples)))
        assert cal.eps == pytest.approx(2.0 * cal.eps0)

    def test_obs_mode(self) -> None:
        cal = calibrate_threshold(_model(), ANTIDERIVATIVE, GaussianFieldSpec(length_scale=0.5),
                                  n_validation=4, seed=2, mode=MismatchKind.OBS, n_obs=3)
        assert cal.mode is MismatchKind.OBS
        assert len(cal.samples) == 4 and cal.eps0 > 0.0

    def test_reproducible(self) -> None:
        spec = GaussianFieldSpec(length_scale=0.5)
        a = calibrate_threshold(_model(), ANTIDERIVATIVE, spec, n_validation=3, seed=7)
        b = calibrate_threshold(_model(), ANTIDERIVATIVE, spec, n_validation=3, seed=7)
        assert a.samples == b.samples

    def test_alpha_below_one(self) -> None:
        with pytest.raises(ValueError, match="alpha"):
            calibrate_threshold(_model(), ANTIDERIVATIVE, GaussianFieldSpec(length_scale=0.5),
                                alpha=0.5)


class TestDecide:
    CALS = {
        MismatchKind.PHYS: _cal(MismatchKind.PHYS, 0.1),
        MismatchKind.OBS:  _cal(MismatchKind.OBS, 0.02),
    }

    def test_phys_only(self) -> None:
        assert decide(self.CALS, e_phys=0.2).decision is Decision.EX_PLUS
        assert decide(self.CALS, e_phys=0.15).decision is Decision.INTERPOLATION_OR_EX_MINUS

    def test_obs_only(self) -> None:
        report = decide(self.CALS, e_obs=0.05)
        assert report.driver is MismatchKind.OBS
        assert report.eps0 == 0.02
        assert report.decision is Decision.EX_PLUS

    def test_larger_ratio_drives(self) -> None:
        report = decide(self.CALS, e_phys=0.12, e_obs=0.1)
        assert report.driver is MismatchKind.OBS
        assert report.decision is Decision.EX_PLUS
        assert report.e_phys == 0.12

    def test_tie_goes_to_phys(self) -> None:
        cals = {MismatchKind.PHYS: _cal(MismatchKind.PHYS, 0.25),
                MismatchKind.OBS:  _cal(MismatchKind.OBS, 0.5)}
        report = decide(cals, e_phys=0.5, e_obs=1.0)
        assert report.driver is MismatchKind.PHYS

    def test_zero_baseline(self) -> None:
        cals = {MismatchKind.PHYS: _cal(MismatchKind.PHYS, 0.0)}
        assert decide(cals, e_phys=1e-9).decision is Decision.EX_PLUS
        assert decide(cals, e_phys=0.0).decision is Decision.INTERPOLATION_OR_EX_MINUS

    def test_nothing_measured(self) -> None:
        with pytest.raises(ValueError, match="at least one"):
            decide(self.CALS)


# ---------------------------------------------------------------------------
# Fine-tuning
# ---------------------------------------------------------------------------

class TestSubsets:
    def test_sizes(self) -> None:
        model = _model()
        total = len(list(model.parameters()))
        branch = subset_parameters(model, ParamSubset.BRANCH)
        trunk = subset_parameters(model, ParamSubset.TRUNK)
        assert len(subset_parameters(model, ParamSubset.BRANCH_AND_TRUNK)) == total
        assert len(branch) + len(trunk) == total - 1
        assert len(subset_parameters(model, ParamSubset.TRUNK_LAST)) == 2


class TestFtPhys:
    def test_loss_decreases_and_model_untouched(self) -> None:
        model = _model()
        before = [p.detach().clone() for p in model.parameters()]
        data = _dataset()
        v = FunctionSample(data.sensors, data.branch_inputs[0])
        result = ft_phys(model, v, ANTIDERIVATIVE, _spec(),
                         reference=(data.queries, data.targets[0]))
        assert isinstance(result, FineTuneResult)
        assert result.history.iterations == [0, 10, 20, 30]
        assert result.history.train_loss[-1] < result.history.train_loss[0]
        assert len(result.history.test_errors["target"]) == 4
        assert _params_equal(before, model.parameters())

    def test_branch_subset_freezes_trunk(self) -> None:
        model = _model()
        result = ft_phys(model, np.ones(M), ANTIDERIVATIVE,
                         _spec(subset=ParamSubset.BRANCH, iterations=5))
        assert _params_equal(model.trunk.parameters(), result.model.trunk.parameters())
        assert result.model.b0.item() == model.b0.item()
        assert not _params_equal(model.branch.parameters(), result.model.branch.parameters())

    def test_rejects_relu_for_second_order(self) -> None:
        model = build_deeponet(_config(query_dim=2, trunk_activation=ActivationKind.RELU))
        with pytest.raises(UnsupportedActivationOrder):
            ft_phys(model, np.zeros(M), problem_for(ProblemKind.BURGERS), _spec())


class TestFtObs:
    def test_alone_lbfgs_fits_observations(self, rng: np.random.Generator) -> None:
        model = _model()
        _, v, obs = _case(rng)
        result = ft_obs_alone(model, v, obs, _spec(optimizer=OptimizerKind.LBFGS, iterations=50))
        assert result.history.iterations[0] == 0
        assert mismatch_obs(result.model, v, obs) < 0.5 * mismatch_obs(model, v, obs)

    def test_alone_adam(self, rng: np.random.Generator) -> None:
        _, v, obs = _case(rng)
        result = ft_obs_alone(_model(), v, obs, _spec(iterations=20))
        assert result.history.iterations == [0, 10, 20]
        assert result.history.train_loss[-1] < result.history.train_loss[0]

    def test_alone_trunk_last_only(self, rng: np.random.Generator) -> None:
        model = _model()
        _, v, obs = _case(rng)
        result = ft_obs_alone(model, v, obs, _spec(subset=ParamSubset.TRUNK_LAST, iterations=5))
        assert _params_equal(model.branch.parameters(), result.model.branch.parameters())
        assert _params_equal(model.trunk.linears[0].parameters(),
                             result.model.trunk.linears[0].parameters())

    def test_together_fixed_lambda(self, rng: np.random.Generator) -> None:
        data, v, obs = _case(rng)
        trainset = _dataset(n=5, seed=0, length=0.5)
        result = ft_obs_together(_model(), v, obs, trainset, _spec(iterations=20, lam=0.5),
                                 reference=(data.queries, data.targets[0]))
        assert result.lambdas == [0.5]
        assert result.history.train_loss[-1] < result.history.train_loss[0]
        assert "target" in result.history.test_errors

    def test_together_adaptive_lambda_grows(self, rng: np.random.Generator) -> None:
        _, v, obs = _case(rng)
        trainset = _dataset(n=5, seed=0, length=0.5)
        spec = _spec(iterations=20, adaptive_lambda=True, lambda_every=5)
        result = ft_obs_together(_model(), v, obs, trainset, spec)
        assert len(result.lambdas) == 5
        assert result.lambdas[0] == 0.1
        assert result.lambdas[-1] > 0.1
        assert all(b >= a for a, b in zip(result.lambdas, result.lambdas[1:]))

    def test_together_adaptive_ignores_fixed_lambda(self, rng: np.random.Generator) -> None:
        _, v, obs = _case(rng)
        trainset = _dataset(n=5, seed=0, length=0.5)
        spec = _spec(iterations=5, lam=0.7, initial_lambda=0.2, adaptive_lambda=True,
                     lambda_every=5)
        assert ft_obs_together(_model(), v, obs, trainset, spec).lambdas[0] == 0.2


class TestPinn:
    def test_hard_constraint(self) -> None:
        pinn = PinnSurrogate([1, 8, 1], ActivationKind.TANH, ANTIDERIVATIVE.hard_constraint)
        out = pinn(torch.tensor([[0.0], [0.5]], dtype=DTYPE))
        assert out.shape == (2,)
        assert out[0].item() == 0.0

    def test_training_lowers_physics_loss(self) -> None:
        v = FunctionSample(sensor_grid(M), np.cos(sensor_grid(M)))
        result = train_pinn(ANTIDERIVATIVE, v, _config(), _spec(iterations=50, log_every=25))
        assert isinstance(result.model, PinnSurrogate)
        assert result.history.iterations == [0, 25, 50]
        assert result.history.train_loss[-1] < result.history.train_loss[0]

    def test_seeded(self) -> None:
        a = PinnSurrogate([1, 4, 1], ActivationKind.TANH, seed=2)
        b = PinnSurrogate([1, 4, 1], ActivationKind.TANH, seed=2)
        assert _params_equal(a.parameters(), b.parameters())
