"""
opex – Extrapolation toolkit for deep operator networks.

Provides:
  - Detect-then-repair façade           (workflow.py      → ExtrapolationWorkflow)
  - Gaussian random fields              (fields.py        → sample_grf)
  - 2-Wasserstein distance, power laws  (wasserstein.py   → w2_distance, fit_power_law)
  - Reference PDE solvers and datasets  (solvers.py       → problem_for, generate_dataset)
  - DeepONet and PIDeepONet training    (deeponet.py      → train, train_pideeponet)
  - Mismatch detection and fine-tuning  (extrapolation.py → decide, ft_phys, ft_obs_together)
  - GPR, MFGPR and MFNN                 (multifidelity.py → gpr_fit, mfgpr_fit, mfnn_fit)
  - Container format                    (container.py     → export, load)
  - Experiment runners and CLI          (harness.py, cli.py)
  - Typed Pydantic v2 models            (types.py)

Quickstart
----------
    from opex import (ExtrapolationWorkflow, GaussianFieldSpec, ProblemKind, RepairMethod,
                      build_deeponet, generate_dataset, problem_for, train)

    problem = problem_for(ProblemKind.ANTIDERIVATIVE)
    data    = generate_dataset(problem, GaussianFieldSpec(length_scale=0.5), 300, seed=0)
    model   = build_deeponet(config, problem)
    train(model, data, iterations=20_000, lr=0.005)

    flow = ExtrapolationWorkflow(model, problem, data)
    flow.calibrate(GaussianFieldSpec(length_scale=0.5))
    u, report = flow.extrapolate(v, RepairMethod.MFGPR, obs)
"""

from .errors import (
    OpexError,
    # Linear algebra and differentiation
    DimensionMismatch,
    NotPSD,
    NotSymmetric,
    EigenFailure,
    NonFiniteGradient,
    UnsupportedActivationOrder,
    LineSearchFailure,
    # Fitting and training
    DegenerateFit,
    NonFiniteLoss,
    DegenerateData,
    ZeroReference,
    # Solvers
    StepFailure,
    Instability,
    CharacteristicEscape,
    PhysicsUnavailable,
    # Containers
    ManifestMismatch,
    ChecksumFailure,
)
from .types import (
    # Enums
    KernelKind,
    ActivationKind,
    ProblemKind,
    ParamSubset,
    OptimizerKind,
    MismatchKind,
    Decision,
    Regime,
    Scale,
    RepairMethod,
    CapacityAxis,
    Placement,
    # Configuration
    GaussianFieldSpec,
    DeepONetConfig,
    MfnnConfig,
    FineTuneSpec,
    ExperimentConfig,
    # Results
    TrainHistory,
    Observations,
    ThresholdCalibration,
    MismatchReport,
    ExtrapolationReport,
    PowerLawFit,
    ResultRow,
    ResultTable,
)
from .fields import FunctionSample, sensor_grid, sample_grf, sample_values, gram_matrix
from .wasserstein import w2_distance, w2_gaussian, fit_power_law, compare_slopes
from .dataset import OperatorDataset
from .solvers import ProblemDef, problem_for, external_problem, generate_dataset, physics_loss
from .deeponet import (
    DeepONet,
    build_deeponet,
    predict,
    train,
    train_pideeponet,
    l2_relative_error,
    function_errors,
)
from .extrapolation import (
    FineTuneResult,
    observe,
    mismatch_phys,
    mismatch_obs,
    calibrate_threshold,
    decide,
    ft_phys,
    ft_obs_alone,
    ft_obs_together,
    train_pinn,
)
from .multifidelity import (
    GprModel,
    MfgprModel,
    Mfnn,
    gpr_fit,
    gpr_predict,
    mfgpr_fit,
    mfgpr_predict,
    mfnn_fit,
    mfnn_predict,
)
from .container import export, load, import_dataset, export_table, import_table
from .workflow import ExtrapolationWorkflow

__all__ = [
    # Errors
    "OpexError",
    "DimensionMismatch",
    "NotPSD",
    "NotSymmetric",
    "EigenFailure",
    "NonFiniteGradient",
    "UnsupportedActivationOrder",
    "LineSearchFailure",
    "DegenerateFit",
    "NonFiniteLoss",
    "DegenerateData",
    "ZeroReference",
    "StepFailure",
    "Instability",
    "CharacteristicEscape",
    "PhysicsUnavailable",
    "ManifestMismatch",
    "ChecksumFailure",
    # Enums
    "KernelKind",
    "ActivationKind",
    "ProblemKind",
    "ParamSubset",
    "OptimizerKind",
    "MismatchKind",
    "Decision",
    "Regime",
    "Scale",
    "RepairMethod",
    "CapacityAxis",
    "Placement",
    # Configuration
    "GaussianFieldSpec",
    "DeepONetConfig",
    "MfnnConfig",
    "FineTuneSpec",
    "ExperimentConfig",
    # Results
    "TrainHistory",
    "Observations",
    "ThresholdCalibration",
    "MismatchReport",
    "ExtrapolationReport",
    "PowerLawFit",
    "ResultRow",
    "ResultTable",
    # Fields and distances
    "FunctionSample",
    "sensor_grid",
    "sample_grf",
    "sample_values",
    "gram_matrix",
    "w2_distance",
    "w2_gaussian",
    "fit_power_law",
    "compare_slopes",
    # Problems and data
    "OperatorDataset",
    "ProblemDef",
    "problem_for",
    "external_problem",
    "generate_dataset",
    "physics_loss",
    # DeepONet
    "DeepONet",
    "build_deeponet",
    "predict",
    "train",
    "train_pideeponet",
    "l2_relative_error",
    "function_errors",
    # Detection and fine-tuning
    "FineTuneResult",
    "observe",
    "mismatch_phys",
    "mismatch_obs",
    "calibrate_threshold",
    "decide",
    "ft_phys",
    "ft_obs_alone",
    "ft_obs_together",
    "train_pinn",
    # Multifidelity
    "GprModel",
    "MfgprModel",
    "Mfnn",
    "gpr_fit",
    "gpr_predict",
    "mfgpr_fit",
    "mfgpr_predict",
    "mfnn_fit",
    "mfnn_predict",
    # Containers
    "export",
    "load",
    "import_dataset",
    "export_table",
    "import_table",
    # Unified façade
    "ExtrapolationWorkflow",
]

__version__ = "0.1.0"
