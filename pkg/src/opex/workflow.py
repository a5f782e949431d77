"""
workflow.py – ExtrapolationWorkflow façade.

Single entry point that owns a frozen pre-trained DeepONet together with
its problem, the optional training set and the calibrated thresholds, so
detection and repair of a new input function take one call each.

Usage
-----
    from opex import ExtrapolationWorkflow, RepairMethod, problem_for, ProblemKind

    flow = ExtrapolationWorkflow(model, problem_for(ProblemKind.ANTIDERIVATIVE), trainset)
    flow.calibrate(field_spec, alpha=1.5)

    report = flow.detect(v, obs)
    if report.is_extrapolation:
        u, summary = flow.extrapolate(v, RepairMethod.MFGPR, obs)
"""

from __future__ import annotations

import logging
import time
from typing import Optional, Union

import numpy as np
import torch
from numpy.typing import ArrayLike, NDArray

from .dataset import OperatorDataset
from .deeponet import DeepONet, forward_at, l2_relative_error
from .errors import ZeroReference
from .extrapolation import (
    calibrate_threshold,
    decide,
    ft_obs_alone,
    ft_obs_together,
    ft_phys,
    mismatch_obs,
    mismatch_phys,
    train_pinn,
)
from .fields import FunctionSample, sensor_grid
from .harness import low_fidelity_points, preset_for
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
from .solvers import ProblemDef
from .types import (
    ExtrapolationReport,
    FineTuneSpec,
    GaussianFieldSpec,
    KernelKind,
    MismatchKind,
    MismatchReport,
    Observations,
    RepairMethod,
    Scale,
    ThresholdCalibration,
)

logger = logging.getLogger(__name__)


class ExtrapolationWorkflow:
    """
    Detect-then-repair façade over one pre-trained DeepONet.

    Parameters
    ----------
    model      : pre-trained DeepONet; never modified (repairs fine-tune copies)
    problem    : problem definition the model was trained for
    trainset   : original training set, needed only by FT-Obs-T
    query_grid : points predictions are returned on; defaults to the
                 problem's 101 (× 101) grid
    kernel     : kernel of the Gaussian-process repairs
    scale      : preset that supplies default fine-tuning budgets
    """

    def __init__(
        self,
        model: DeepONet,
        problem: ProblemDef,
        trainset: Optional[OperatorDataset] = None,
        *,
        query_grid: Optional[ArrayLike] = None,
        kernel: KernelKind = KernelKind.RBF,
        scale: Scale = Scale.DESK,
    ) -> None:
        self.model      = model
        self.problem    = problem
        self.trainset   = trainset
        self.query_grid = (problem.quadrature_grid() if query_grid is None
                           else np.asarray(query_grid, dtype=np.float64))
        self.kernel     = kernel
        self.preset     = preset_for(scale, problem.kind)
        self.calibrations: dict[MismatchKind, ThresholdCalibration] = {}

    # ------------------------------------------------------------------
    # Detection
    # ------------------------------------------------------------------

    def calibrate(
        self,
        field_spec: GaussianFieldSpec,
        alpha: float = 1.5,
        n_validation: int = 100,
        seed: int = 0,
        *,
        modes: tuple[MismatchKind, ...] = (MismatchKind.PHYS, MismatchKind.OBS),
        n_obs: int = 7,
    ) -> dict[MismatchKind, ThresholdCalibration]:
        """Calibrate ε0 for each requested mismatch kind on the training space."""
        for mode in modes:
            self.calibrations[mode] = calibrate_threshold(
                self.model, self.problem, field_spec, alpha, n_validation, seed,
                mode=mode, n_obs=n_obs)
        return self.calibrations

    def detect(
        self, v: Union[FunctionSample, ArrayLike], obs: Optional[Observations] = None
    ) -> MismatchReport:
        """Mismatch errors of v and the In./Ex.- versus Ex.+ decision."""
        if not self.calibrations:
            raise RuntimeError("call calibrate() before detect()")
        sample = self._sample(v)
        e_phys = (mismatch_phys(self.model, sample, self.problem)
                  if MismatchKind.PHYS in self.calibrations else None)
        e_obs  = (mismatch_obs(self.model, sample, obs)
                  if obs is not None and MismatchKind.OBS in self.calibrations else None)
        report = decide(self.calibrations, e_phys=e_phys, e_obs=e_obs)
        logger.info("Detection: %s (driver %s, E=%.3e, eps=%.3e)", report.decision.name,
                    report.driver.name, report.measured, report.alpha * report.eps0)
        return report

    # ------------------------------------------------------------------
    # Repair
    # ------------------------------------------------------------------

    def extrapolate(
        self,
        v: Union[FunctionSample, ArrayLike],
        method: RepairMethod,
        obs: Optional[Observations] = None,
        *,
        reference: Optional[ArrayLike] = None,
        spec: Optional[FineTuneSpec] = None,
        force: bool = False,
    ) -> tuple[NDArray[np.float64], ExtrapolationReport]:
        """
        Detect, and for Ex.+ (or ``force``) repair with ``method``.

        Returns the prediction on ``query_grid`` and a report; with
        ``reference`` values on the same grid the report carries the L2
        relative error before and after.
        """
        if method.needs_observations and obs is None:
            raise ValueError(f"{method.label} needs observations")
        sample = self._sample(v)
        report = self.detect(sample, obs)
        start  = time.perf_counter()
        frozen = self._frozen(sample)
        if report.is_extrapolation or force:
            prediction = self.repair(sample, method, obs, spec=spec)
            used = method
        else:
            prediction = frozen
            used = RepairMethod.FROZEN
        runtime = time.perf_counter() - start

        before = after = None
        if reference is not None:
            ref = np.asarray(reference, dtype=np.float64).reshape(-1)
            try:
                before = l2_relative_error(frozen, ref)
                after  = l2_relative_error(prediction, ref)
            except ZeroReference:
                logger.warning("Reference is identically zero; errors not reported")
        summary = ExtrapolationReport(mismatch=report, method=used, error_before=before,
                                      error_after=after, runtime_s=runtime)
        return prediction, summary

    def repair(
        self,
        v: Union[FunctionSample, ArrayLike],
        method: RepairMethod,
        obs: Optional[Observations] = None,
        *,
        spec: Optional[FineTuneSpec] = None,
        seed: int = 0,
    ) -> NDArray[np.float64]:
        """Prediction of ``method`` on the query grid, without detection."""
        sample = self._sample(v)
        kind   = self.problem.kind
        points = self.query_grid
        pre    = self.preset
        if method is RepairMethod.FROZEN:
            return self._frozen(sample)
        if method in (RepairMethod.FT_PHYS, RepairMethod.PINN):
            spec = spec or FineTuneSpec(lr=pre.ft_phys_lrs[0], iterations=pre.ft_phys_iterations,
                                        seed=seed)
            if method is RepairMethod.PINN:
                pinn = train_pinn(self.problem, sample, self.model.config, spec).model
                with torch.no_grad():
                    return pinn(torch.as_tensor(points, dtype=DTYPE)).numpy()
            return self._frozen(sample, ft_phys(self.model, sample, self.problem, spec).model)
        if method is RepairMethod.PIDEEPONET:
            raise ValueError("PIDeepONet is a separately trained model; use train_pideeponet")

        assert obs is not None
        locs  = np.asarray(obs.locations, dtype=np.float64)
        noise = None if obs.noise_level > 0 else 1e-10
        if method is RepairMethod.FT_OBS_A:
            spec = spec or pre.ft_obs_a.model_copy(update={"seed": seed})
            return self._frozen(sample, ft_obs_alone(self.model, sample, obs, spec).model)
        if method is RepairMethod.FT_OBS_T:
            if self.trainset is None:
                raise ValueError("FT-Obs-T needs the original training set")
            spec = spec or FineTuneSpec(lr=1e-3, iterations=pre.ft_obs_t_iterations, seed=seed)
            tuned = ft_obs_together(self.model, sample, obs, self.trainset, spec).model
            return self._frozen(sample, tuned)
        if method is RepairMethod.GPR:
            gp = gpr_fit(locs, obs.values, self.kernel, noise=noise, seed=seed)
            return gpr_predict(gp, points)[0]
        low_x = low_fidelity_points(points, pre.dense_points, seed)
        low_y = self._frozen(sample, points=low_x)
        if method is RepairMethod.MFGPR:
            mf = mfgpr_fit(low_x, low_y, locs, obs.values, self.kernel, noise=noise, seed=seed)
            return mfgpr_predict(mf, points)
        net, _ = mfnn_fit(low_x, low_y, locs, obs.values, mfnn_config(kind, obs.count, seed))
        return mfnn_predict(net, points)

    # ------------------------------------------------------------------
    # Helpers
    # ------------------------------------------------------------------

    def _sample(self, v: Union[FunctionSample, ArrayLike]) -> FunctionSample:
        if isinstance(v, FunctionSample):
            return v
        values = np.asarray(v, dtype=np.float64)
        return FunctionSample(sensor_grid(values.size), values)

    def _frozen(
        self,
        v: FunctionSample,
        model: Optional[DeepONet] = None,
        points: Optional[NDArray[np.float64]] = None,
    ) -> NDArray[np.float64]:
        grid = self.query_grid if points is None else points
        with torch.no_grad():
            return forward_at(model or self.model, v, grid).numpy()
