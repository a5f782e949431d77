"""
types.py – Pydantic v2 models and enumerations shared across opex.

Configuration objects (field specs, network architectures, fine-tuning
recipes, experiment descriptions) and the reports produced by the
library (mismatch decisions, power-law fits, result tables) live here.
Numeric payloads such as sampled functions, datasets and solution fields
are plain dataclasses over numpy arrays and live next to the code that
produces them.

Validation
----------
All models are validated on construction.  Invalid data raises
pydantic.ValidationError with field-level detail rather than letting a
negative correlation length or an empty seed list reach a solver:

    spec = GaussianFieldSpec(kernel=KernelKind.RBF, length_scale=0.5)
    cfg  = ExperimentConfig.model_validate_json(path.read_text())

Enumerations
------------
Enums are IntEnums so they serialise compactly; model fields also accept
the member name as a string ("rbf", "gelu", "trunk_last") which keeps
JSON configs readable.
"""

from __future__ import annotations

import hashlib
import math
from enum import IntEnum, unique
from typing import Any, Optional, TypeVar

from pydantic import BaseModel, Field, field_validator, model_validator


# ---------------------------------------------------------------------------
# Enumerations  (plain IntEnum – Pydantic handles them natively)
# ---------------------------------------------------------------------------

@unique
class KernelKind(IntEnum):
    """Stationary covariance kernels for input fields and Gaussian process regression."""
    RBF              = 1
    EXP_SINE_SQUARED = 2
    MATERN15         = 3

    @property
    def label(self) -> str:
        return self.name.lower()


@unique
class ActivationKind(IntEnum):
    IDENTITY = 0
    TANH     = 1
    RELU     = 2
    SILU     = 3
    GELU     = 4
    HAT      = 5

    @property
    def label(self) -> str:
        return self.name.lower()

    @property
    def smooth(self) -> bool:
        """True when the activation is C3, so second input derivatives are meaningful."""
        return self in (ActivationKind.IDENTITY, ActivationKind.TANH,
                        ActivationKind.SILU, ActivationKind.GELU)


@unique
class ProblemKind(IntEnum):
    ANTIDERIVATIVE     = 1
    DIFFUSION_REACTION = 2
    BURGERS            = 3
    ADVECTION          = 4
    EXTERNAL           = 5   # imported dataset, no reference solver

    @property
    def label(self) -> str:
        return self.name.lower().replace("_", "-")

    @property
    def query_dim(self) -> int:
        return 1 if self is ProblemKind.ANTIDERIVATIVE else 2

    @property
    def default_kernel(self) -> KernelKind:
        """Burgers inputs are periodic initial conditions."""
        return KernelKind.EXP_SINE_SQUARED if self is ProblemKind.BURGERS else KernelKind.RBF


@unique
class ParamSubset(IntEnum):
    """Which DeepONet parameters a fine-tune is allowed to update."""
    BRANCH_AND_TRUNK = 1
    BRANCH           = 2
    TRUNK            = 3
    TRUNK_LAST       = 4

    @property
    def label(self) -> str:
        return self.name.lower().replace("_", "-")


@unique
class OptimizerKind(IntEnum):
    ADAM  = 1
    LBFGS = 2


@unique
class MismatchKind(IntEnum):
    PHYS = 1   # mean absolute PDE residual
    OBS  = 2   # root relative squared error at observations


@unique
class Decision(IntEnum):
    INTERPOLATION_OR_EX_MINUS = 1
    EX_PLUS                   = 2


@unique
class Regime(IntEnum):
    IN       = 1
    EX_MINUS = 2
    EX_PLUS  = 3

    @classmethod
    def classify(cls, l_train: float, l_test: float) -> "Regime":
        """Rougher test functions (shorter correlation length) are harmful extrapolation."""
        if math.isclose(l_train, l_test, rel_tol=1e-12, abs_tol=1e-12):
            return cls.IN
        return cls.EX_MINUS if l_test > l_train else cls.EX_PLUS


@unique
class Scale(IntEnum):
    DESK = 1
    FULL = 2

    @property
    def label(self) -> str:
        return self.name.lower()


@unique
class RepairMethod(IntEnum):
    FROZEN     = 1   # pre-trained DeepONet, no repair
    PIDEEPONET = 2
    PINN       = 3
    FT_PHYS    = 4
    FT_OBS_A   = 5
    FT_OBS_T   = 6
    GPR        = 7
    MFGPR      = 8
    MFNN       = 9

    @property
    def label(self) -> str:
        return {
            RepairMethod.FROZEN:     "DeepONet",
            RepairMethod.PIDEEPONET: "PIDeepONet",
            RepairMethod.PINN:       "PINN",
            RepairMethod.FT_PHYS:    "FT-Phys",
            RepairMethod.FT_OBS_A:   "FT-Obs-A",
            RepairMethod.FT_OBS_T:   "FT-Obs-T",
            RepairMethod.GPR:        "GPR",
            RepairMethod.MFGPR:      "MFGPR",
            RepairMethod.MFNN:       "MFNN",
        }[self]

    @property
    def needs_observations(self) -> bool:
        return self in (RepairMethod.FT_OBS_A, RepairMethod.FT_OBS_T, RepairMethod.GPR,
                        RepairMethod.MFGPR, RepairMethod.MFNN)


@unique
class CapacityAxis(IntEnum):
    WIDTH        = 1
    ITERATIONS   = 2
    DATASET_SIZE = 3
    ACTIVATION   = 4
    LAAF_SCALE   = 5

    @property
    def label(self) -> str:
        return self.name.lower().replace("_", "-")


@unique
class Placement(IntEnum):
    UNIFORM_RANDOM = 1
    FIXED_LIST     = 2


# ---------------------------------------------------------------------------
# Shared validator helpers
# ---------------------------------------------------------------------------

_E = TypeVar("_E", bound=IntEnum)


def parse_enum(cls: type[_E], v: Any) -> Any:
    """Accept enum members, their int values, or their (case-insensitive) names."""
    if isinstance(v, str):
        key = v.strip().upper().replace("-", "_")
        try:
            return cls[key]
        except KeyError:
            for member in cls:
                if getattr(member, "label", None) == v:
                    return member
            raise ValueError(f"'{v}' is not a valid {cls.__name__}")
    return v


def _require_positive(v: float, field: str) -> float:
    if not v > 0:
        raise ValueError(f"{field} must be > 0, got {v}")
    return v


# ---------------------------------------------------------------------------
# Input-function distributions
# ---------------------------------------------------------------------------

class GaussianFieldSpec(BaseModel):
    """A mean-zero stationary Gaussian random field on [0, 1]."""
    model_config = {"frozen": True}

    kernel:       KernelKind = KernelKind.RBF
    length_scale: float
    periodicity:  float      = 1.0   # ExpSineSquared only
    variance:     float      = 1.0

    @field_validator("kernel", mode="before")
    @classmethod
    def parse_kernel(cls, v: Any) -> Any:
        return parse_enum(KernelKind, v)

    @field_validator("length_scale", "periodicity")
    @classmethod
    def validate_positive(cls, v: float) -> float:
        return _require_positive(v, "length_scale/periodicity")

    @field_validator("variance")
    @classmethod
    def validate_variance(cls, v: float) -> float:
        if v != 1.0:
            raise ValueError(f"field variance is fixed at 1.0, got {v}")
        return v

    def with_length(self, length_scale: float) -> "GaussianFieldSpec":
        return self.model_copy(update={"length_scale": length_scale})


# ---------------------------------------------------------------------------
# Networks
# ---------------------------------------------------------------------------

class DeepONetConfig(BaseModel):
    """
    Branch/trunk architecture of a DeepONet.

    Depth counts linear layers, so depth 3 with width 40 and p = 40 is
    m → 40 → 40 → 40.  The branch net ends linearly; the trunk applies its
    activation to the last layer as well.
    """
    model_config = {"validate_assignment": True}

    sensor_count:      int            = 100
    query_dim:         int            = 1
    branch_depth:      int            = 3
    branch_width:      int            = 40
    branch_activation: ActivationKind = ActivationKind.RELU
    trunk_depth:       int            = 3
    trunk_width:       int            = 40
    trunk_activation:  ActivationKind = ActivationKind.TANH
    latent_width:      int            = 40
    laaf_scale:        Optional[float] = None   # L-LAAF on the trunk
    branch_laaf_scale: Optional[float] = None
    seed:              int            = 0

    @field_validator("branch_activation", "trunk_activation", mode="before")
    @classmethod
    def parse_activation(cls, v: Any) -> Any:
        return parse_enum(ActivationKind, v)

    @field_validator("sensor_count", "query_dim", "branch_depth", "branch_width",
                     "trunk_depth", "trunk_width", "latent_width")
    @classmethod
    def validate_count(cls, v: int) -> int:
        if v < 1:
            raise ValueError(f"layer counts and widths must be >= 1, got {v}")
        return v

    @field_validator("laaf_scale", "branch_laaf_scale")
    @classmethod
    def validate_laaf(cls, v: Optional[float]) -> Optional[float]:
        if v is not None:
            _require_positive(v, "laaf scaling factor")
        return v

    @property
    def branch_layers(self) -> list[int]:
        hidden = [self.branch_width] * (self.branch_depth - 1)
        return [self.sensor_count] + hidden + [self.latent_width]

    @property
    def trunk_layers(self) -> list[int]:
        return [self.query_dim] + [self.trunk_width] * (self.trunk_depth - 1) + [self.latent_width]


class MfnnConfig(BaseModel):
    """Sizes and training recipe of a two-fidelity neural network."""
    low_depth:   int            = 4
    low_width:   int            = 40
    high_depth:  int            = 3
    high_width:  int            = 30
    activation:  ActivationKind = ActivationKind.SILU
    lr:          float          = 0.005
    iterations:  int            = 10_000
    l2:          float          = 1e-6
    seed:        int            = 0

    @field_validator("activation", mode="before")
    @classmethod
    def parse_activation(cls, v: Any) -> Any:
        return parse_enum(ActivationKind, v)

    @field_validator("lr")
    @classmethod
    def validate_lr(cls, v: float) -> float:
        return _require_positive(v, "lr")

    @field_validator("l2")
    @classmethod
    def validate_l2(cls, v: float) -> float:
        if v < 0:
            raise ValueError(f"l2 must be >= 0, got {v}")
        return v


# ---------------------------------------------------------------------------
# Training bookkeeping
# ---------------------------------------------------------------------------

class TrainHistory(BaseModel):
    """Loss and labelled test errors sampled during training."""
    iterations:  list[int]              = Field(default_factory=list)
    train_loss:  list[float]            = Field(default_factory=list)
    test_errors: dict[str, list[float]] = Field(default_factory=dict)

    @model_validator(mode="after")
    def validate_monotone(self) -> "TrainHistory":
        if any(b <= a for a, b in zip(self.iterations, self.iterations[1:])):
            raise ValueError("history iterations must be strictly increasing")
        return self

    def record(
        self, iteration: int, loss: float, errors: Optional[dict[str, float]] = None
    ) -> None:
        if self.iterations and iteration <= self.iterations[-1]:
            raise ValueError(f"iteration {iteration} is not after {self.iterations[-1]}")
        self.iterations.append(iteration)
        self.train_loss.append(loss)
        for label, err in (errors or {}).items():
            self.test_errors.setdefault(label, []).append(err)


# ---------------------------------------------------------------------------
# Extrapolation detection and repair
# ---------------------------------------------------------------------------

class FineTuneSpec(BaseModel):
    """Recipe for FT-Phys, FT-Obs-A and FT-Obs-T."""
    model_config = {"validate_assignment": True}

    subset:          ParamSubset   = ParamSubset.BRANCH_AND_TRUNK
    lr:              float         = 1e-3
    iterations:      int           = 1000
    w_f:             float         = 1.0
    w_b:             float         = 1.0
    lam:             float         = 0.3     # fixed λ
    initial_lambda:  float         = 0.1     # starting λ when adaptive
    adaptive_lambda: bool          = False
    lambda_rate:     float         = 0.3
    lambda_every:    int           = 100
    optimizer:       OptimizerKind = OptimizerKind.ADAM
    n_domain:        int           = 2500
    n_boundary:      int           = 200
    log_every:       int           = 100
    seed:            int           = 0

    @field_validator("subset", mode="before")
    @classmethod
    def parse_subset(cls, v: Any) -> Any:
        return parse_enum(ParamSubset, v)

    @field_validator("optimizer", mode="before")
    @classmethod
    def parse_optimizer(cls, v: Any) -> Any:
        return parse_enum(OptimizerKind, v)

    @field_validator("lr")
    @classmethod
    def validate_lr(cls, v: float) -> float:
        return _require_positive(v, "lr")

    @field_validator("lam", "initial_lambda", "w_f", "w_b", "lambda_rate")
    @classmethod
    def validate_non_negative(cls, v: float) -> float:
        if v < 0:
            raise ValueError(f"weights and lambda must be >= 0, got {v}")
        return v

    @field_validator("iterations", "lambda_every", "n_domain", "n_boundary", "log_every")
    @classmethod
    def validate_count(cls, v: int) -> int:
        if v < 1:
            raise ValueError(f"counts must be >= 1, got {v}")
        return v


class Observations(BaseModel):
    """Sparse measurements of the output function of one input."""
    locations:   list[list[float]]
    values:      list[float]
    noise_level: float = 0.0

    @field_validator("locations")
    @classmethod
    def validate_locations(cls, v: list[list[float]]) -> list[list[float]]:
        if not v:
            raise ValueError("at least one observation is required")
        dims = {len(p) for p in v}
        if len(dims) != 1 or 0 in dims:
            raise ValueError("observation locations must share one non-zero dimension")
        return v

    @field_validator("noise_level")
    @classmethod
    def validate_noise(cls, v: float) -> float:
        if v < 0:
            raise ValueError(f"noise_level must be >= 0, got {v}")
        return v

    @model_validator(mode="after")
    def validate_counts(self) -> "Observations":
        if len(self.values) != len(self.locations):
            raise ValueError(
                f"{len(self.locations)} locations but {len(self.values)} values"
            )
        return self

    @property
    def count(self) -> int:
        return len(self.values)

    @property
    def dim(self) -> int:
        return len(self.locations[0])


class ThresholdCalibration(BaseModel):
    """Baseline mismatch ε0 measured on fresh training-space functions."""
    mode:         MismatchKind
    eps0:         float
    alpha:        float = 1.5
    n_validation: int
    samples:      list[float] = Field(default_factory=list)   # per-function mismatch

    @field_validator("alpha")
    @classmethod
    def validate_alpha(cls, v: float) -> float:
        if v < 1:
            raise ValueError(f"alpha must be >= 1, got {v}")
        return v

    @field_validator("eps0")
    @classmethod
    def validate_eps0(cls, v: float) -> float:
        if v < 0 or not math.isfinite(v):
            raise ValueError(f"eps0 must be finite and >= 0, got {v}")
        return v

    @property
    def eps(self) -> float:
        return self.alpha * self.eps0


class MismatchReport(BaseModel):
    """
    Outcome of extrapolation detection for one input function.

    When both mismatch errors are available the one that exceeds its own
    baseline by the larger ratio drives the decision; ``driver`` names it
    and ``eps0`` is that mismatch's baseline.
    """
    e_phys:   Optional[float] = None
    e_obs:    Optional[float] = None
    eps0:     float
    alpha:    float
    driver:   MismatchKind
    decision: Decision

    @model_validator(mode="after")
    def validate_decision(self) -> "MismatchReport":
        measured = self.e_phys if self.driver is MismatchKind.PHYS else self.e_obs
        if measured is None:
            raise ValueError(f"driving mismatch {self.driver.name} was not measured")
        expected = Decision.EX_PLUS if measured > self.alpha * self.eps0 else \
            Decision.INTERPOLATION_OR_EX_MINUS
        if self.decision is not expected:
            raise ValueError(f"decision {self.decision.name} contradicts measured error")
        return self

    @property
    def measured(self) -> float:
        value = self.e_phys if self.driver is MismatchKind.PHYS else self.e_obs
        assert value is not None
        return value

    @property
    def is_extrapolation(self) -> bool:
        return self.decision is Decision.EX_PLUS


class ExtrapolationReport(BaseModel):
    """Detection result, chosen repair and the errors around it."""
    mismatch:     MismatchReport
    method:       Optional[RepairMethod] = None
    error_before: Optional[float]        = None
    error_after:  Optional[float]        = None
    runtime_s:    float                  = 0.0


# ---------------------------------------------------------------------------
# Complexity fits
# ---------------------------------------------------------------------------

class PowerLawFit(BaseModel):
    """error ≈ exp(log_intercept) · W2 ** exponent, with a 95% CI on the exponent."""
    exponent:        float
    log_intercept:   float
    exponent_stderr: float
    ci_low:          float
    ci_high:         float
    dof:             int
    residuals:       list[float] = Field(default_factory=list)

    @model_validator(mode="after")
    def validate_ci(self) -> "PowerLawFit":
        tol = 1e-12 * max(1.0, abs(self.exponent))
        if not (self.ci_low - tol <= self.exponent <= self.ci_high + tol):
            raise ValueError("confidence interval must contain the exponent")
        return self


# ---------------------------------------------------------------------------
# Experiments and results
# ---------------------------------------------------------------------------

class ExperimentConfig(BaseModel):
    """
    Everything needed to reproduce one sweep or comparison.

    Fields left as None are filled from the scale presets for the problem
    (see harness.preset).
    """
    model_config = {"validate_assignment": True}

    problem:          ProblemKind
    kernel:           Optional[KernelKind]    = None    # None: the problem's own kernel
    periodicity:      float                   = 1.0
    l_train:          list[float]             = Field(default_factory=lambda: [0.5])
    l_test:           list[float]             = Field(default_factory=lambda: [0.2])
    model:            Optional[DeepONetConfig] = None
    methods:          list[RepairMethod]      = Field(default_factory=lambda: [RepairMethod.FROZEN])
    seeds:            list[int]               = Field(default_factory=lambda: [0, 1, 2])
    scale:            Scale                   = Scale.DESK
    n_train:          Optional[int]           = None
    n_test:           Optional[int]           = None
    iterations:       Optional[int]           = None
    lr:               Optional[float]         = None
    noise_levels:     list[float]             = Field(default_factory=lambda: [0.0])
    n_obs:            int                     = 7
    placement:        Placement               = Placement.UNIFORM_RANDOM
    fixed_locations:  Optional[list[list[float]]] = None
    alpha:            float                   = 1.5
    n_validation:     int                     = 100
    ft_subsets:       list[ParamSubset]       = Field(default_factory=lambda: [ParamSubset.TRUNK])
    ft_phys_lrs:      Optional[list[float]]   = None
    obs_lambda:       float                   = 0.3
    initial_lambda:   float                   = 0.1
    adaptive_lambda:  bool                    = False
    capacity_axis:    CapacityAxis            = CapacityAxis.WIDTH
    capacity_values:  list[float]             = Field(default_factory=list)
    workers:          int                     = 1
    checkpoint:       Optional[str]           = None
    dataset:          Optional[str]           = None

    @field_validator("problem", mode="before")
    @classmethod
    def parse_problem(cls, v: Any) -> Any:
        return parse_enum(ProblemKind, v)

    @field_validator("kernel", mode="before")
    @classmethod
    def parse_kernel(cls, v: Any) -> Any:
        return parse_enum(KernelKind, v)

    @field_validator("scale", mode="before")
    @classmethod
    def parse_scale(cls, v: Any) -> Any:
        return parse_enum(Scale, v)

    @field_validator("placement", mode="before")
    @classmethod
    def parse_placement(cls, v: Any) -> Any:
        return parse_enum(Placement, v)

    @field_validator("capacity_axis", mode="before")
    @classmethod
    def parse_axis(cls, v: Any) -> Any:
        return parse_enum(CapacityAxis, v)

    @field_validator("methods", mode="before")
    @classmethod
    def parse_methods(cls, v: Any) -> Any:
        return [parse_enum(RepairMethod, m) for m in v]

    @field_validator("ft_subsets", mode="before")
    @classmethod
    def parse_subsets(cls, v: Any) -> Any:
        return [parse_enum(ParamSubset, s) for s in v]

    @field_validator("l_train", "l_test")
    @classmethod
    def validate_lengths(cls, v: list[float]) -> list[float]:
        if not v:
            raise ValueError("correlation-length grids must be non-empty")
        for length in v:
            _require_positive(length, "correlation length")
        return v

    @field_validator("seeds")
    @classmethod
    def validate_seeds(cls, v: list[int]) -> list[int]:
        if not v:
            raise ValueError("seed list must be non-empty")
        return v

    @field_validator("noise_levels")
    @classmethod
    def validate_noise(cls, v: list[float]) -> list[float]:
        if any(level < 0 for level in v):
            raise ValueError("noise levels must be >= 0")
        return v

    @field_validator("alpha")
    @classmethod
    def validate_alpha(cls, v: float) -> float:
        if v < 1:
            raise ValueError(f"alpha must be >= 1, got {v}")
        return v

    @field_validator("n_obs", "n_validation", "workers")
    @classmethod
    def validate_count(cls, v: int) -> int:
        if v < 1:
            raise ValueError(f"counts must be >= 1, got {v}")
        return v

    @model_validator(mode="after")
    def validate_placement(self) -> "ExperimentConfig":
        if self.placement is Placement.FIXED_LIST and not self.fixed_locations:
            raise ValueError("fixed-list placement needs fixed_locations")
        return self

    @property
    def field_spec(self) -> GaussianFieldSpec:
        kernel = self.problem.default_kernel if self.kernel is None else self.kernel
        return GaussianFieldSpec(kernel=kernel, length_scale=self.l_train[0],
                                 periodicity=self.periodicity)

    def config_hash(self) -> str:
        """SHA-256 of the canonical JSON dump; embedded in every ResultTable."""
        return hashlib.sha256(self.model_dump_json().encode("utf-8")).hexdigest()


class ResultRow(BaseModel):
    """One aggregated cell of a result table (mean ± std over functions and seeds)."""
    method:      str
    setting:     str
    metric:      str   = "l2_rel"
    mean:        float
    std:         float
    runtime_s:   float = 0.0
    count:       int   = 1
    config_hash: str
    extras:      dict[str, float] = Field(default_factory=dict)

    @field_validator("std", "runtime_s")
    @classmethod
    def validate_non_negative(cls, v: float) -> float:
        if v < 0:
            raise ValueError(f"std and runtime must be >= 0, got {v}")
        return v


class ResultTable(BaseModel):
    """Rows plus the provenance needed to re-run them."""
    config_hash: str
    seeds:       list[int]
    version:     str
    rows:        list[ResultRow] = Field(default_factory=list)

    @model_validator(mode="after")
    def validate_provenance(self) -> "ResultTable":
        for row in self.rows:
            if row.config_hash != self.config_hash:
                raise ValueError(f"row {row.method}/{row.setting} belongs to another config")
        return self

    def add(self, row: ResultRow) -> None:
        if row.config_hash != self.config_hash:
            raise ValueError(f"row {row.method}/{row.setting} belongs to another config")
        self.rows.append(row)

    def sorted_rows(self) -> list[ResultRow]:
        """Rows ordered by (method, setting); equal keys keep insertion order."""
        return sorted(self.rows, key=lambda r: (r.method, r.setting))

    def lookup(self, method: str, setting: Optional[str] = None) -> list[ResultRow]:
        return [r for r in self.rows
                if r.method == method and (setting is None or r.setting == setting)]
