"""
solvers.py – Benchmark problems: reference solvers and physics operators.

Problems
--------
  antiderivative      du/dx = v(x),                          u(0) = 0
  diffusion-reaction  u_t = D u_xx + k u² + v(x),            zero IC and BC
  burgers             u_t + u u_x = ν u_xx,  u(x, 0) = v(x),  periodic in x
  advection           u_t + v(x) u_x = 0,    u(x, 0) = sin(πx), u(0, t) = sin(πt/2)

Every problem is a ProblemDef carrying its reference solver, its residual
operator F[u; v], a sampler for boundary/initial constraints B[u; v] and
an optional hard-constraint transform.  Input functions live on the sensor
grid and are evaluated elsewhere through cubic splines.

Reference solvers
-----------------
  solve_antiderivative      RK45 (rtol 1e-8) on the sensor grid
  solve_diffusion_reaction  Crank–Nicolson diffusion + Adams–Bashforth reaction
  solve_burgers             Crank–Nicolson diffusion + Adams–Bashforth conservative
                            convection, periodic, solved spectrally
  solve_advection           backward characteristics with RK4 and bisection

Usage
-----
    problem = problem_for(ProblemKind.DIFFUSION_REACTION)
    data    = generate_dataset(problem, GaussianFieldSpec(length_scale=0.5), n=100, seed=0)
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch
from numpy.typing import ArrayLike, NDArray
from scipy.integrate import solve_ivp
from scipy.interpolate import CubicSpline
from scipy.linalg import solve_banded
from torch import Tensor

from .dataset import OperatorDataset
from .errors import (
    CharacteristicEscape,
    Instability,
    PhysicsUnavailable,
    StepFailure,
    UnsupportedActivationOrder,
)
from .fields import FunctionSample, derive_advection_speed, sample_values, sensor_grid
from .nd_core import DTYPE, input_jets
from .types import ActivationKind, GaussianFieldSpec, KernelKind, ProblemKind

logger = logging.getLogger(__name__)

_BLOWUP_NORM   = 1e6
_BURGERS_MIN_N = 512

FieldFn = Callable[[Tensor], Tensor]   # (B, Q, d) points → (B, Q) values


# ---------------------------------------------------------------------------
# Solution fields
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SolutionField:
    """
    Output function on a tensor-product grid.

    ``values`` is (nx,) for steady problems and (nx, nt) with
    ``values[i, j] = u(x_i, t_j)`` for time-dependent ones.
    """
    x:      NDArray[np.float64]
    values: NDArray[np.float64]
    t:      Optional[NDArray[np.float64]] = None

    def __post_init__(self) -> None:
        expected = (self.x.size,) if self.t is None else (self.x.size, self.t.size)
        if self.values.shape != expected:
            raise ValueError(f"solution values have shape {self.values.shape}, expected {expected}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("solution contains non-finite values")

    @property
    def query_dim(self) -> int:
        return 1 if self.t is None else 2

    def points(self) -> NDArray[np.float64]:
        if self.t is None:
            return self.x.reshape(-1, 1)
        xx, tt = np.meshgrid(self.x, self.t, indexing="ij")
        return np.column_stack([xx.ravel(), tt.ravel()])

    def flat_values(self) -> NDArray[np.float64]:
        return self.values.ravel()


# ---------------------------------------------------------------------------
# Reference solvers
# ---------------------------------------------------------------------------

def _spline(v: FunctionSample, periodic: bool = False) -> CubicSpline:
    if periodic:
        values = v.values.copy()
        values[-1] = values[0]
        return CubicSpline(v.grid, values, bc_type="periodic")
    return CubicSpline(v.grid, v.values)


def solve_antiderivative(v: FunctionSample, query: Optional[ArrayLike] = None) -> SolutionField:
    """u(x) = ∫₀ˣ v, integrated with RK45 on the sensor grid (or ``query``)."""
    spline = _spline(v)
    x      = v.grid if query is None else np.asarray(query, dtype=np.float64)
    sol = solve_ivp(
        lambda s, u: np.atleast_1d(spline(s)),
        (0.0, float(x[-1])),
        [0.0],
        method="RK45",
        t_eval=x,
        rtol=1e-8,
        atol=1e-12,
        max_step=float(np.min(np.diff(v.grid))),
    )
    if not sol.success:
        raise StepFailure(sol.message)
    return SolutionField(x=x, values=sol.y[0])


def solve_diffusion_reaction(
    v: FunctionSample,
    k: float = 0.01,
    D: float = 0.01,
    *,
    nx: int = 101,
    nt: int = 101,
    refine: int = 1,
) -> SolutionField:
    """
    Second-order IMEX finite differences on [0, 1]².

    The internal grid has (nx-1)·refine + 1 nodes in x and (nt-1)·refine
    time steps; the result is restricted to the nx × nt output grid.
    """
    if k < 0 or D <= 0:
        raise ValueError(f"need k >= 0 and D > 0, got k={k}, D={D}")
    n     = (nx - 1) * refine + 1
    x     = np.linspace(0.0, 1.0, n)
    h     = 1.0 / (n - 1)
    steps = (nt - 1) * refine
    dt    = 1.0 / steps
    force = _spline(v)(x[1:-1])
    m     = n - 2
    r     = D * dt / (2.0 * h * h)

    banded = np.zeros((3, m))
    banded[0, 1:]  = -r
    banded[1, :]   = 1.0 + 2.0 * r
    banded[2, :-1] = -r

    out      = np.zeros((nx, nt))
    u        = np.zeros(m)
    previous: Optional[NDArray[np.float64]] = None
    for step in range(1, steps + 1):
        reaction = k * u * u
        explicit = reaction if previous is None else 1.5 * reaction - 0.5 * previous
        rhs = (1.0 - 2.0 * r) * u
        rhs[1:]  += r * u[:-1]
        rhs[:-1] += r * u[1:]
        rhs += dt * (explicit + force)
        previous = reaction
        u = solve_banded((1, 1), banded, rhs)
        peak = float(np.max(np.abs(u)))
        if not math.isfinite(peak) or peak > _BLOWUP_NORM:
            raise Instability(peak, step * dt)
        if step % refine == 0:
            out[:, step // refine] = np.concatenate(([0.0], u, [0.0]))[::refine]
    return SolutionField(x=np.linspace(0.0, 1.0, nx), values=out, t=np.linspace(0.0, 1.0, nt))


def solve_burgers(
    v0: FunctionSample,
    nu: float = 0.1,
    *,
    nx: int = 101,
    nt: int = 101,
    refine: Optional[int] = None,
    cfl: float = 0.25,
) -> SolutionField:
    """
    Periodic viscous Burgers on [0, 1) × [0, 1].

    Convection uses the conservative central flux difference of u²/2,
    advanced with Adams–Bashforth 2; diffusion is Crank–Nicolson.  The
    periodic implicit system is circulant and solved with the real FFT.
    Without ``refine`` the grid has at least 512 points; the time step keeps
    the convective CFL number at or below ``cfl``.
    """
    if nu <= 0:
        raise ValueError(f"viscosity must be > 0, got {nu}")
    if abs(v0.values[0] - v0.values[-1]) > 1e-8:
        raise ValueError("Burgers initial condition must be periodic on [0, 1]")
    r  = refine if refine is not None else math.ceil(_BURGERS_MIN_N / (nx - 1))
    N  = (nx - 1) * r
    xs = np.arange(N) / N
    h  = 1.0 / N
    u  = _spline(v0, periodic=True)(xs)

    u_max   = max(float(np.max(np.abs(u))), 1e-12)
    out_dt  = 1.0 / (nt - 1)
    m0      = max(1, math.ceil(out_dt * u_max * (nx - 1) / cfl))
    per_out = m0 * r
    dt      = out_dt / per_out

    wave    = np.arange(N // 2 + 1)
    symbol  = (2.0 * np.cos(2.0 * np.pi * wave / N) - 2.0) / (h * h)
    explicit_factor = 1.0 + 0.5 * dt * nu * symbol
    implicit_factor = 1.0 - 0.5 * dt * nu * symbol

    def convection(w: NDArray[np.float64]) -> NDArray[np.float64]:
        flux = 0.5 * w * w
        return -(np.roll(flux, -1) - np.roll(flux, 1)) / (2.0 * h)

    out = np.zeros((nx, nt))
    out[:, 0] = np.append(u[::r], u[0])
    previous: Optional[NDArray[np.float64]] = None
    for step in range(1, per_out * (nt - 1) + 1):
        current  = convection(u)
        explicit = current if previous is None else 1.5 * current - 0.5 * previous
        previous = current
        u_hat = (explicit_factor * np.fft.rfft(u) + dt * np.fft.rfft(explicit)) / implicit_factor
        u = np.fft.irfft(u_hat, n=N)
        peak = float(np.max(np.abs(u)))
        if not math.isfinite(peak) or peak > _BLOWUP_NORM:
            raise Instability(peak, step * dt)
        if step % per_out == 0:
            out[:, step // per_out] = np.append(u[::r], u[0])
    return SolutionField(x=np.linspace(0.0, 1.0, nx), values=out, t=np.linspace(0.0, 1.0, nt))


def solve_advection(
    v: FunctionSample,
    *,
    nx: int = 101,
    nt: int = 101,
    substeps: int = 1000,
) -> SolutionField:
    """
    Method of characteristics for u_t + v(x) u_x = 0 on [0, 1]².

    From each output node the characteristic is traced backward in time
    with RK4.  If it reaches t = 0 inside the domain the initial condition
    is read at its foot; if it leaves through x = 0 first, the crossing
    time τ is located by bisection inside the last substep and the inflow
    condition is read at t - τ.
    """
    v_min = float(v.values.min())
    if v_min <= 0.0:
        raise CharacteristicEscape(v_min)
    speed   = _spline(v)
    per_out = math.ceil(substeps / (nt - 1))
    dt      = 1.0 / (per_out * (nt - 1))

    def rk4(z: NDArray[np.float64], step: float | NDArray[np.float64]) -> NDArray[np.float64]:
        k1 = speed(z)
        k2 = speed(z - 0.5 * step * k1)
        k3 = speed(z - 0.5 * step * k2)
        k4 = speed(z - step * k3)
        return z - step * (k1 + 2.0 * k2 + 2.0 * k3 + k4) / 6.0

    x    = np.linspace(0.0, 1.0, nx)
    t    = np.linspace(0.0, 1.0, nt)
    foot = x.copy()
    tau  = np.where(x <= 0.0, 0.0, np.nan)
    out  = np.zeros((nx, nt))
    out[:, 0] = np.sin(np.pi * x)

    for step in range(1, per_out * (nt - 1) + 1):
        active = np.isnan(tau)
        if np.any(active):
            start = foot[active]
            moved = rk4(start, dt)
            crossing = moved <= 0.0
            if np.any(crossing):
                lo = np.zeros(int(crossing.sum()))
                hi = np.ones_like(lo)
                z0 = start[crossing]
                while float(np.max(hi - lo)) * dt > 1e-10:
                    mid   = 0.5 * (lo + hi)
                    below = rk4(z0, mid * dt) <= 0.0
                    hi    = np.where(below, mid, hi)
                    lo    = np.where(below, lo, mid)
                idx = np.flatnonzero(active)[crossing]
                tau[idx] = (step - 1) * dt + 0.5 * (lo + hi) * dt
            foot[active] = moved
        if foot.max() > 1.0 + 1e-12:
            raise CharacteristicEscape(v_min)
        if step % per_out == 0:
            j = step // per_out
            inflow = ~np.isnan(tau)
            out[:, j] = np.where(inflow, np.sin(0.5 * np.pi * (t[j] - np.nan_to_num(tau))),
                                 np.sin(np.pi * foot))
    return SolutionField(x=x, values=out, t=t)


# ---------------------------------------------------------------------------
# Physics operators
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FieldDerivatives:
    """u and the partial derivatives a residual may need, each shaped (B, Q)."""
    u:    Tensor
    u_x:  Tensor
    u_xx: Tensor
    u_t:  Optional[Tensor] = None


@dataclass(frozen=True)
class BoundaryBatch:
    """
    Boundary/initial constraint points.

    The residual is u(points) - target, or u(points) - u(partner) for
    periodic constraints.  ``target`` is (Q,) shared by every input
    function or (B, Q) per function.
    """
    points:  NDArray[np.float64]
    target:  Optional[NDArray[np.float64]] = None
    partner: Optional[NDArray[np.float64]] = None


VEval = Callable[[NDArray[np.float64]], NDArray[np.float64]]   # x (Q,) → v values (B, Q)
Residual = Callable[[FieldDerivatives, Tensor, Tensor], Tensor]
BoundarySampler = Callable[[np.random.Generator, int, VEval], list[BoundaryBatch]]
HardConstraint = Callable[[Tensor, Tensor], Tensor]


@dataclass(frozen=True)
class ProblemDef:
    kind:            ProblemKind
    coefficients:    dict[str, float]
    residual:        Residual
    boundary:        BoundarySampler
    solver:          Optional[Callable[[FunctionSample], SolutionField]]
    prepare:         Callable[[FunctionSample], FunctionSample] = lambda v: v
    hard_constraint: Optional[HardConstraint] = None
    time_dependent:  bool       = True
    second_order:    bool       = False
    kernel:          KernelKind = KernelKind.RBF
    space:           tuple[float, float] = (0.0, 1.0)
    time:            tuple[float, float] = (0.0, 1.0)

    @property
    def query_dim(self) -> int:
        return 2 if self.time_dependent else 1

    def check_activation(self, activation: ActivationKind) -> None:
        """Reject trunk activations whose second derivative vanishes almost everywhere."""
        if self.second_order and not activation.smooth:
            raise UnsupportedActivationOrder(activation.label, 2)

    def derivatives(self, fn: FieldFn, xi: Tensor) -> FieldDerivatives:
        orders = {0: 2 if self.second_order else 1}
        if self.time_dependent:
            orders[1] = 1
        jets = input_jets(fn, xi, orders)
        return FieldDerivatives(
            u    = jets[0].value,
            u_x  = jets[0].d1,
            u_xx = jets[0].d2,
            u_t  = jets[1].d1 if self.time_dependent else None,
        )

    def sample_domain(self, rng: np.random.Generator, n: int) -> NDArray[np.float64]:
        lo = [self.space[0]] + ([self.time[0]] if self.time_dependent else [])
        hi = [self.space[1]] + ([self.time[1]] if self.time_dependent else [])
        return rng.uniform(lo, hi, size=(n, len(lo)))

    def quadrature_grid(self, nx: int = 101, nt: int = 101) -> NDArray[np.float64]:
        x = np.linspace(*self.space, nx)
        if not self.time_dependent:
            return x.reshape(-1, 1)
        xx, tt = np.meshgrid(x, np.linspace(*self.time, nt), indexing="ij")
        return np.column_stack([xx.ravel(), tt.ravel()])

    def contains(self, points: ArrayLike, tol: float = 1e-12) -> bool:
        pts = np.asarray(points, dtype=np.float64).reshape(-1, self.query_dim)
        ok  = (pts[:, 0] >= self.space[0] - tol) & (pts[:, 0] <= self.space[1] + tol)
        if self.time_dependent:
            ok &= (pts[:, 1] >= self.time[0] - tol) & (pts[:, 1] <= self.time[1] + tol)
        return bool(np.all(ok))


def _antiderivative_residual(d: FieldDerivatives, v_at: Tensor, xi: Tensor) -> Tensor:
    return d.u_x - v_at


def _antiderivative_boundary(
    rng: np.random.Generator, n: int, v_eval: VEval
) -> list[BoundaryBatch]:
    return [BoundaryBatch(points=np.zeros((1, 1)), target=np.zeros(1))]


def _times_x(xi: Tensor, out: Tensor) -> Tensor:
    return xi[..., 0] * out


def _diffusion_reaction_residual(k: float, D: float) -> Residual:
    def residual(d: FieldDerivatives, v_at: Tensor, xi: Tensor) -> Tensor:
        assert d.u_t is not None
        return d.u_t - D * d.u_xx - k * d.u * d.u - v_at
    return residual


def _zero_ic_bc(rng: np.random.Generator, n: int, v_eval: VEval) -> list[BoundaryBatch]:
    n_ic, n_side = n // 2, n - n // 2
    ic   = np.column_stack([rng.uniform(0.0, 1.0, n_ic), np.zeros(n_ic)])
    side = np.column_stack([(np.arange(n_side) % 2).astype(np.float64),
                            rng.uniform(0.0, 1.0, n_side)])
    pts  = np.vstack([ic, side])
    return [BoundaryBatch(points=pts, target=np.zeros(len(pts)))]


def _burgers_residual(nu: float) -> Residual:
    def residual(d: FieldDerivatives, v_at: Tensor, xi: Tensor) -> Tensor:
        assert d.u_t is not None
        return d.u_t + d.u * d.u_x - nu * d.u_xx
    return residual


def _burgers_boundary(rng: np.random.Generator, n: int, v_eval: VEval) -> list[BoundaryBatch]:
    n_ic, n_per = n // 2, n - n // 2
    x_ic = rng.uniform(0.0, 1.0, n_ic)
    t_bc = rng.uniform(0.0, 1.0, n_per)
    return [
        BoundaryBatch(points=np.column_stack([x_ic, np.zeros(n_ic)]), target=v_eval(x_ic)),
        BoundaryBatch(points=np.column_stack([np.zeros(n_per), t_bc]),
                      partner=np.column_stack([np.ones(n_per), t_bc])),
    ]


def _advection_residual(d: FieldDerivatives, v_at: Tensor, xi: Tensor) -> Tensor:
    assert d.u_t is not None
    return d.u_t + v_at * d.u_x


def _advection_boundary(rng: np.random.Generator, n: int, v_eval: VEval) -> list[BoundaryBatch]:
    n_ic, n_in = n // 2, n - n // 2
    x_ic = rng.uniform(0.0, 1.0, n_ic)
    t_in = rng.uniform(0.0, 1.0, n_in)
    return [
        BoundaryBatch(points=np.column_stack([x_ic, np.zeros(n_ic)]), target=np.sin(np.pi * x_ic)),
        BoundaryBatch(points=np.column_stack([np.zeros(n_in), t_in]),
                      target=np.sin(0.5 * np.pi * t_in)),
    ]


def antiderivative_problem(*, hard_constraint: bool = True) -> ProblemDef:
    return ProblemDef(
        kind            = ProblemKind.ANTIDERIVATIVE,
        coefficients    = {},
        residual        = _antiderivative_residual,
        boundary        = _antiderivative_boundary,
        solver          = solve_antiderivative,
        hard_constraint = _times_x if hard_constraint else None,
        time_dependent  = False,
    )


def diffusion_reaction_problem(k: float = 0.01, D: float = 0.01) -> ProblemDef:
    if k < 0 or D <= 0:
        raise ValueError(f"need k >= 0 and D > 0, got k={k}, D={D}")
    return ProblemDef(
        kind         = ProblemKind.DIFFUSION_REACTION,
        coefficients = {"k": k, "D": D},
        residual     = _diffusion_reaction_residual(k, D),
        boundary     = _zero_ic_bc,
        solver       = lambda v: solve_diffusion_reaction(v, k, D),
        second_order = True,
    )


def burgers_problem(nu: float = 0.1) -> ProblemDef:
    if nu <= 0:
        raise ValueError(f"viscosity must be > 0, got {nu}")
    return ProblemDef(
        kind         = ProblemKind.BURGERS,
        coefficients = {"nu": nu},
        residual     = _burgers_residual(nu),
        boundary     = _burgers_boundary,
        solver       = lambda v: solve_burgers(v, nu),
        second_order = True,
        kernel       = KernelKind.EXP_SINE_SQUARED,
    )


def advection_problem() -> ProblemDef:
    return ProblemDef(
        kind         = ProblemKind.ADVECTION,
        coefficients = {},
        residual     = _advection_residual,
        boundary     = _advection_boundary,
        solver       = solve_advection,
        prepare      = derive_advection_speed,
    )


def external_problem(query_dim: int = 2) -> ProblemDef:
    """Placeholder for imported datasets: data-only methods work, physics ones do not."""
    def no_residual(d: FieldDerivatives, v_at: Tensor, xi: Tensor) -> Tensor:
        raise PhysicsUnavailable(ProblemKind.EXTERNAL.label)

    return ProblemDef(
        kind           = ProblemKind.EXTERNAL,
        coefficients   = {},
        residual       = no_residual,
        boundary       = lambda rng, n, v_eval: [],
        solver         = None,
        time_dependent = query_dim == 2,
    )


def problem_for(kind: ProblemKind, **coefficients: float) -> ProblemDef:
    if kind is ProblemKind.ANTIDERIVATIVE:
        return antiderivative_problem()
    if kind is ProblemKind.DIFFUSION_REACTION:
        return diffusion_reaction_problem(**coefficients)
    if kind is ProblemKind.BURGERS:
        return burgers_problem(**coefficients)
    if kind is ProblemKind.ADVECTION:
        return advection_problem()
    return external_problem()


# ---------------------------------------------------------------------------
# Collocation and physics losses
# ---------------------------------------------------------------------------

def sensor_interpolant(sensors: ArrayLike, values: ArrayLike) -> VEval:
    """Cubic-spline evaluator of B input functions: x (Q,) → (B, Q)."""
    table  = np.atleast_2d(np.asarray(values, dtype=np.float64))
    spline = CubicSpline(np.asarray(sensors, dtype=np.float64), table.T, axis=0)
    return lambda x: np.asarray(spline(np.asarray(x, dtype=np.float64))).T


@dataclass(frozen=True)
class Collocation:
    """Interior and boundary points for the physics loss of B input functions."""
    domain:   NDArray[np.float64]            # (Q, d)
    v_domain: NDArray[np.float64]            # (B, Q)
    boundary: list[BoundaryBatch] = field(default_factory=list)

    @property
    def batch(self) -> int:
        return int(self.v_domain.shape[0])


def make_collocation(
    problem: ProblemDef,
    sensors: ArrayLike,
    v_values: ArrayLike,
    *,
    n_domain: int,
    n_boundary: int,
    rng: np.random.Generator,
) -> Collocation:
    v_eval = sensor_interpolant(sensors, v_values)
    domain = problem.sample_domain(rng, n_domain)
    return Collocation(domain=domain, v_domain=v_eval(domain[:, 0]),
                       boundary=problem.boundary(rng, n_boundary, v_eval))


def _expand(points: NDArray[np.float64], batch: int) -> Tensor:
    pts = torch.as_tensor(points, dtype=DTYPE)
    return pts.unsqueeze(0).expand(batch, *pts.shape).contiguous()


def residual_values(problem: ProblemDef, fn: FieldFn, points: NDArray[np.float64],
                    v_values: NDArray[np.float64]) -> Tensor:
    """F[u; v] at shared ``points`` for B functions; (B, Q), on the autograd graph."""
    v_at = torch.as_tensor(np.atleast_2d(v_values), dtype=DTYPE)
    xi   = _expand(points, v_at.shape[0])
    return problem.residual(problem.derivatives(fn, xi), v_at, xi)


def boundary_values(fn: FieldFn, batch: BoundaryBatch, n_functions: int) -> Tensor:
    pred = fn(_expand(batch.points, n_functions))
    if batch.partner is not None:
        return pred - fn(_expand(batch.partner, n_functions))
    assert batch.target is not None
    return pred - torch.as_tensor(batch.target, dtype=DTYPE)


def physics_loss(
    problem: ProblemDef,
    fn: FieldFn,
    colloc: Collocation,
    w_f: float = 1.0,
    w_b: float = 1.0,
) -> Tensor:
    """w_F · mean F² + w_B · Σ mean B², averaged over the B input functions."""
    loss = torch.zeros((), dtype=DTYPE)
    if w_f > 0:
        res  = residual_values(problem, fn, colloc.domain, colloc.v_domain)
        loss = loss + w_f * torch.mean(res ** 2)
    if w_b > 0:
        for batch in colloc.boundary:
            loss = loss + w_b * torch.mean(boundary_values(fn, batch, colloc.batch) ** 2)
    return loss


# ---------------------------------------------------------------------------
# Dataset generation
# ---------------------------------------------------------------------------

def solve_inputs(
    problem: ProblemDef,
    inputs: Sequence[FunctionSample],
    *,
    field_spec: Optional[GaussianFieldSpec] = None,
    seed: Optional[int] = None,
    workers: int = 1,
) -> OperatorDataset:
    """Solve already-prepared input functions and assemble the triplet layout."""
    if not inputs:
        raise ValueError("at least one input function is required")
    if problem.solver is None:
        raise ValueError(f"problem {problem.kind.label} has no reference solver")
    solver = problem.solver
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        solutions = list(pool.map(solver, inputs))
    return OperatorDataset(
        branch_inputs = np.stack([v.values for v in inputs]),
        queries       = solutions[0].points(),
        targets       = np.stack([s.flat_values() for s in solutions]),
        sensors       = inputs[0].grid,
        problem       = problem.kind,
        field         = field_spec,
        seed          = seed,
    )


def generate_dataset(
    problem: ProblemDef,
    field_spec: GaussianFieldSpec,
    n: int,
    seed: int,
    *,
    sensors: Optional[ArrayLike] = None,
    workers: int = 1,
) -> OperatorDataset:
    """Sample ``n`` input functions, solve each, and stack the results."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    grid = sensor_grid() if sensors is None else np.asarray(sensors, dtype=np.float64)
    raw  = sample_values(field_spec, grid, n, np.random.default_rng(seed))
    inputs = [problem.prepare(FunctionSample(grid, row)) for row in raw]
    data = solve_inputs(problem, inputs, field_spec=field_spec, seed=seed, workers=workers)
    logger.info("Generated %s dataset: %d functions × %d queries (l=%g, seed=%d)",
                problem.kind.label, n, data.targets.shape[1], field_spec.length_scale, seed)
    return data
