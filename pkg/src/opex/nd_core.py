"""
nd_core.py – Dense numerics and small-network differentiation.

Two halves:

Linear algebra (numpy / scipy)
------------------------------
  cholesky_psd   lower Cholesky factor with a ×10 jitter ladder up to 1e-4
  sqrtm_psd      symmetric square root through eigh, eigenvalues clamped at 0

Networks and optimisers (torch, float64)
----------------------------------------
  Mlp            feed-forward net, Glorot-uniform weights, zero biases,
                 optional layer-wise adaptive activation σ(n·a·x)
  mlp_eval       plain forward value
  mlp_param_grad reverse-mode parameter gradient of a loss over outputs
  input_jets     value plus first and second input derivatives along chosen
                 coordinates; the returned tensors stay on the autograd graph so
                 parameter gradients of residuals built from them are exact
  adam_step      one bias-corrected Adam update
  lbfgs_minimize two-loop L-BFGS with Armijo backtracking

Usage
-----
    net  = Mlp([1, 40, 40, 1], ActivationKind.TANH, generator=torch.Generator().manual_seed(0))
    jets = input_jets(lambda z: net(z).squeeze(-1), xi, {0: 2})
    residual = jets[0].d2 + torch.sin(xi[:, 0])
"""

from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Optional, Sequence

import numpy as np
import scipy.linalg
import torch
import torch.nn.functional as F
from numpy.typing import ArrayLike, NDArray
from torch import Tensor, nn
from torch.nn.utils import parameters_to_vector, vector_to_parameters

from .errors import (
    DimensionMismatch,
    EigenFailure,
    LineSearchFailure,
    NonFiniteGradient,
    NotPSD,
    NotSymmetric,
    UnsupportedActivationOrder,
)
from .types import ActivationKind

logger = logging.getLogger(__name__)

DTYPE = torch.float64

DenseMatrix = NDArray[np.float64]

_JITTER_START   = 1e-12
_JITTER_CAP     = 1e-4
_SYMMETRY_RTOL  = 1e-12
_EIG_CLAMP_RTOL = 1e-10


# ---------------------------------------------------------------------------
# Dense linear algebra
# ---------------------------------------------------------------------------

def _as_square(a: ArrayLike, what: str) -> DenseMatrix:
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1] or arr.shape[0] == 0:
        raise DimensionMismatch("non-empty square matrix", arr.shape, what)
    return arr


def cholesky_psd(a: ArrayLike, jitter: float = 0.0) -> tuple[DenseMatrix, float]:
    """
    Lower Cholesky factor of ``a + jitter·I``.

    When factorisation fails the jitter is escalated ×10 (starting from
    1e-12 if it was 0) until it succeeds or passes 1e-4.

    Returns
    -------
    (L, jitter_used)
    """
    mat = _as_square(a, "cholesky input")
    if jitter < 0:
        raise ValueError(f"jitter must be >= 0, got {jitter}")
    eye     = np.eye(mat.shape[0])
    current = jitter
    while True:
        try:
            chol = scipy.linalg.cholesky(mat + current * eye, lower=True)
        except np.linalg.LinAlgError:
            if current >= _JITTER_CAP:
                raise NotPSD(current) from None
            current = _JITTER_START if current == 0 else min(current * 10.0, _JITTER_CAP)
            continue
        if current > jitter:
            log = logger.warning if current > 1e-8 else logger.debug
            log("Cholesky needed jitter %.1e (requested %.1e)", current, jitter)
        return chol, current


def sqrtm_psd(a: ArrayLike) -> DenseMatrix:
    """Symmetric PSD square root; slightly negative eigenvalues are clamped to 0."""
    mat   = _as_square(a, "sqrtm input")
    scale = float(np.max(np.abs(mat)))
    asym  = float(np.max(np.abs(mat - mat.T)))
    if asym > _SYMMETRY_RTOL * scale:
        raise NotSymmetric(asym)
    if scale == 0.0:
        return np.zeros_like(mat)
    try:
        eigvals, eigvecs = scipy.linalg.eigh(0.5 * (mat + mat.T))
    except np.linalg.LinAlgError as exc:
        raise EigenFailure(str(exc)) from exc
    top = max(float(eigvals[-1]), 0.0)
    if float(eigvals[0]) < -_EIG_CLAMP_RTOL * top:
        raise NotPSD(0.0)
    root = (eigvecs * np.sqrt(np.clip(eigvals, 0.0, None))) @ eigvecs.T
    return 0.5 * (root + root.T)


# ---------------------------------------------------------------------------
# Activations
# ---------------------------------------------------------------------------

def _hat(x: Tensor) -> Tensor:
    # 0 outside [0, 2), x on [0, 1), 2 - x on [1, 2)
    return torch.relu(x) - 2.0 * torch.relu(x - 1.0) + torch.relu(x - 2.0)


_ACTIVATIONS: dict[ActivationKind, Callable[[Tensor], Tensor]] = {
    ActivationKind.IDENTITY: lambda x: x,
    ActivationKind.TANH:     torch.tanh,
    ActivationKind.RELU:     torch.relu,
    ActivationKind.SILU:     F.silu,
    ActivationKind.GELU:     F.gelu,     # exact erf form
    ActivationKind.HAT:      _hat,
}


def activation_fn(kind: ActivationKind) -> Callable[[Tensor], Tensor]:
    return _ACTIVATIONS[kind]


def activation_eval(
    kind: ActivationKind,
    x: float,
    *,
    laaf_scale: Optional[float] = None,
    slope: Optional[float] = None,
) -> float:
    """
    Scalar activation value.  With ``laaf_scale`` n the adaptive form
    σ(n·a·x) is used, ``slope`` a defaulting to its initial value 1/n.
    """
    z = torch.tensor(x, dtype=DTYPE)
    if laaf_scale is not None:
        a = 1.0 / laaf_scale if slope is None else slope
        z = z * (laaf_scale * a)
    return float(activation_fn(kind)(z))


# ---------------------------------------------------------------------------
# Multilayer perceptron
# ---------------------------------------------------------------------------

class Mlp(nn.Module):
    """
    Fully connected network in float64.

    Parameters
    ----------
    layer_sizes      : widths from input to output, at least two entries
    activation       : hidden-layer activation
    final_activation : also apply the activation after the last layer
    laaf_scale       : n of the layer-wise adaptive activation σ(n·a·x); one
                       trainable a per activated layer, initialised to 1/n
    generator        : torch.Generator for Glorot-uniform initialisation
    """

    def __init__(
        self,
        layer_sizes: Sequence[int],
        activation: ActivationKind,
        *,
        final_activation: bool = False,
        laaf_scale: Optional[float] = None,
        generator: Optional[torch.Generator] = None,
    ) -> None:
        super().__init__()
        if len(layer_sizes) < 2:
            raise ValueError(
                f"an MLP needs at least input and output sizes, got {list(layer_sizes)}")
        self.layer_sizes      = list(layer_sizes)
        self.activation       = activation
        self.final_activation = final_activation
        self.laaf_scale       = laaf_scale
        self.linears = nn.ModuleList(
            nn.Linear(n_in, n_out, dtype=DTYPE)
            for n_in, n_out in zip(self.layer_sizes, self.layer_sizes[1:])
        )
        n_activated = len(self.linears) - (0 if final_activation else 1)
        slopes: Optional[nn.Parameter] = None
        if laaf_scale is not None and n_activated > 0:
            slopes = nn.Parameter(torch.full((n_activated,), 1.0 / laaf_scale, dtype=DTYPE))
        self.register_parameter("slopes", slopes)
        glorot_uniform_(self, generator)

    @property
    def in_features(self) -> int:
        return self.layer_sizes[0]

    @property
    def out_features(self) -> int:
        return self.layer_sizes[-1]

    def forward(self, x: Tensor) -> Tensor:
        act  = activation_fn(self.activation)
        last = len(self.linears) - 1
        for i, linear in enumerate(self.linears):
            x = linear(x)
            if i < last or self.final_activation:
                if self.slopes is not None:
                    assert self.laaf_scale is not None
                    x = x * (self.laaf_scale * self.slopes[i])
                x = act(x)
        return x


def glorot_uniform_(mlp: Mlp, generator: Optional[torch.Generator] = None) -> None:
    """Re-initialise weights U(±sqrt(6 / (fan_in + fan_out))) and zero the biases."""
    with torch.no_grad():
        for linear in mlp.linears:
            bound = math.sqrt(6.0 / (linear.in_features + linear.out_features))
            linear.weight.uniform_(-bound, bound, generator=generator)
            linear.bias.zero_()


def mlp_eval(mlp: Mlp, x: ArrayLike) -> NDArray[np.float64]:
    """Forward value without building a graph."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 0 or arr.shape[-1] != mlp.in_features:
        raise DimensionMismatch(mlp.in_features, arr.shape, "mlp input")
    with torch.no_grad():
        out = mlp(torch.as_tensor(arr, dtype=DTYPE))
    return out.numpy()


# ---------------------------------------------------------------------------
# Reverse mode
# ---------------------------------------------------------------------------

def param_grad(loss: Tensor, params: Sequence[Tensor]) -> list[Tensor]:
    """
    Gradient of a scalar loss with respect to ``params``.

    Parameters the loss does not reach get zero gradients.  Raises
    NonFiniteGradient when any component is NaN or Inf.
    """
    if not loss.requires_grad:
        return [torch.zeros_like(p) for p in params]
    grads = torch.autograd.grad(loss, list(params), allow_unused=True)
    out   = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]
    bad   = sum(int((~torch.isfinite(g)).sum()) for g in out)
    if bad:
        raise NonFiniteGradient(bad)
    return out


def mlp_param_grad(
    mlp: Mlp,
    x: ArrayLike,
    loss_fn: Callable[[Tensor], Tensor],
) -> list[Tensor]:
    """Gradient of ``loss_fn(mlp(x))`` laid out like ``mlp.parameters()``."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 0 or arr.shape[-1] != mlp.in_features:
        raise DimensionMismatch(mlp.in_features, arr.shape, "mlp input")
    loss = loss_fn(mlp(torch.as_tensor(arr, dtype=DTYPE)))
    return param_grad(loss, list(mlp.parameters()))


# ---------------------------------------------------------------------------
# Input jets
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Jet2:
    """Value with first and second derivative along one input coordinate, per point."""
    value: Tensor
    d1:    Tensor
    d2:    Tensor


def _input_grad(y: Tensor, x: Tensor) -> Tensor:
    if not y.requires_grad:
        return torch.zeros_like(x)
    (g,) = torch.autograd.grad(y.sum(), x, create_graph=True, allow_unused=True)
    return torch.zeros_like(x) if g is None else g


def input_jets(
    fn: Callable[[Tensor], Tensor],
    x: Tensor,
    orders: Mapping[int, int],
) -> dict[int, Jet2]:
    """
    Jets of a pointwise field ``fn`` along the coordinates in ``orders``.

    ``fn`` maps points of shape (..., d) to values of shape (...); each
    output may depend only on its own point.  ``orders`` maps coordinate
    index to the highest derivative order needed (1 or 2).
    """
    for k, order in orders.items():
        if not 0 <= k < x.shape[-1]:
            raise DimensionMismatch(f"coordinate < {x.shape[-1]}", k, "jet direction")
        if order not in (1, 2):
            raise ValueError(f"jet order must be 1 or 2, got {order}")
    xi    = x.detach().clone().requires_grad_(True)
    value = fn(xi)
    grad  = _input_grad(value, xi)
    jets: dict[int, Jet2] = {}
    for k, order in orders.items():
        d1 = grad[..., k]
        d2 = _input_grad(d1, xi)[..., k] if order == 2 else torch.zeros_like(d1)
        jets[k] = Jet2(value=value, d1=d1, d2=d2)
    return jets


def input_jet(fn: Callable[[Tensor], Tensor], x: Tensor, k: int, order: int = 2) -> Jet2:
    return input_jets(fn, x, {k: order})[k]


def mlp_input_jet(mlp: Mlp, x: Tensor, k: int, order: int = 2, output: int = 0) -> Jet2:
    """Jet of output component ``output`` of ``mlp`` along input coordinate ``k``."""
    if order >= 2 and not mlp.activation.smooth:
        raise UnsupportedActivationOrder(mlp.activation.label, order)
    if x.shape[-1] != mlp.in_features:
        raise DimensionMismatch(mlp.in_features, tuple(x.shape), "mlp input")
    return input_jet(lambda z: mlp(z)[..., output], x, k, order)


# ---------------------------------------------------------------------------
# Optimisers
# ---------------------------------------------------------------------------

def make_adam(params: Sequence[Tensor], lr: float) -> torch.optim.Adam:
    """Adam with β1=0.9, β2=0.999, ε=1e-8."""
    if lr <= 0:
        raise ValueError(f"lr must be > 0, got {lr}")
    return torch.optim.Adam(list(params), lr=lr, betas=(0.9, 0.999), eps=1e-8)


def adam_step(
    optimizer: torch.optim.Adam, params: Sequence[Tensor], grads: Sequence[Tensor]
) -> None:
    """Apply one bias-corrected Adam update with externally computed gradients."""
    for p, g in zip(params, grads):
        p.grad = g.detach()
    optimizer.step()


LossAndGrad = Callable[[Tensor], tuple[float, Tensor]]


@dataclass
class LbfgsResult:
    x:          Tensor
    loss:       float
    grad_norm:  float
    iterations: int
    converged:  bool
    fallbacks:  list[int] = field(default_factory=list)   # steepest-descent iterations


def _two_loop(g: Tensor, s_hist: deque[Tensor], y_hist: deque[Tensor]) -> Tensor:
    q = g.clone()
    coeffs: list[tuple[float, float]] = []
    for s, y in zip(reversed(s_hist), reversed(y_hist)):
        rho = 1.0 / float(y @ s)
        a   = rho * float(s @ q)
        q   = q - a * y
        coeffs.append((rho, a))
    if s_hist:
        s, y = s_hist[-1], y_hist[-1]
        q = q * (float(s @ y) / float(y @ y))
    for (s, y), (rho, a) in zip(zip(s_hist, y_hist), reversed(coeffs)):
        b = rho * float(y @ q)
        q = q + (a - b) * s
    return q


def _armijo(
    fun: LossAndGrad,
    x: Tensor,
    f: float,
    g: Tensor,
    d: Tensor,
    iteration: int,
    c1: float,
    max_halvings: int = 40,
) -> tuple[Tensor, float, Tensor]:
    slope = float(g @ d)
    step  = 1.0
    for _ in range(max_halvings):
        x_new = x + step * d
        f_new, g_new = fun(x_new)
        if math.isfinite(f_new) and f_new <= f + c1 * step * slope:
            return x_new, f_new, g_new
        step *= 0.5
    raise LineSearchFailure(iteration)


def lbfgs_minimize(
    fun: LossAndGrad,
    x0: Tensor,
    *,
    history: int = 10,
    max_iter: int = 500,
    gtol: float = 1e-9,
    c1: float = 1e-4,
) -> LbfgsResult:
    """
    Minimise ``fun`` (returning loss and gradient) from ``x0``.

    Stops when the gradient norm drops below ``gtol`` or after
    ``max_iter`` iterations.  If backtracking fails along the quasi-Newton
    direction the memory is dropped and a steepest-descent step is tried;
    the iteration is recorded in ``fallbacks``.
    """
    x = x0.detach().clone()
    f, g = fun(x)
    s_hist: deque[Tensor] = deque(maxlen=history)
    y_hist: deque[Tensor] = deque(maxlen=history)
    fallbacks: list[int] = []

    for it in range(max_iter):
        gnorm = float(torch.linalg.vector_norm(g))
        if gnorm < gtol:
            return LbfgsResult(x, f, gnorm, it, True, fallbacks)
        steepest = -g / max(1.0, gnorm)
        d = -_two_loop(g, s_hist, y_hist) if s_hist else steepest
        if float(g @ d) >= 0.0:
            s_hist.clear()
            y_hist.clear()
            d = steepest
        try:
            x_new, f_new, g_new = _armijo(fun, x, f, g, d, it, c1)
        except LineSearchFailure:
            logger.warning("L-BFGS line search failed at iteration %d; steepest-descent fallback",
                           it)
            fallbacks.append(it)
            s_hist.clear()
            y_hist.clear()
            try:
                x_new, f_new, g_new = _armijo(fun, x, f, g, steepest, it, c1)
            except LineSearchFailure:
                return LbfgsResult(x, f, gnorm, it, False, fallbacks)
        s  = x_new - x
        y  = g_new - g
        sy = float(s @ y)
        if sy > 1e-12 * float(torch.linalg.vector_norm(s) * torch.linalg.vector_norm(y)):
            s_hist.append(s)
            y_hist.append(y)
        x, f, g = x_new, f_new, g_new

    gnorm = float(torch.linalg.vector_norm(g))
    logger.debug("L-BFGS stopped at the iteration cap, |g| = %.3e", gnorm)
    return LbfgsResult(x, f, gnorm, max_iter, gnorm < gtol, fallbacks)


def lbfgs_parameters(
    params: Sequence[nn.Parameter],
    loss_fn: Callable[[], Tensor],
    **kwargs: Any,
) -> LbfgsResult:
    """Run :func:`lbfgs_minimize` over a list of parameters in place."""
    params = list(params)

    def fun(vec: Tensor) -> tuple[float, Tensor]:
        with torch.no_grad():
            vector_to_parameters(vec, params)
        loss  = loss_fn()
        grads = param_grad(loss, params)
        return float(loss), parameters_to_vector(grads).detach()

    result = lbfgs_minimize(fun, parameters_to_vector(params).detach(), **kwargs)
    with torch.no_grad():
        vector_to_parameters(result.x, params)
    return result
