"""
errors.py – Exception hierarchy for opex.

Every failure the library raises on purpose derives from OpexError, so
callers can catch the whole family with one clause.  Each subclass keeps
its diagnostic fields as attributes and renders them into a one-line
message.

Usage
-----
    from opex.errors import NotPSD, OpexError

    try:
        chol, jitter = cholesky_psd(gram)
    except NotPSD as exc:
        print("gave up at jitter", exc.jitter)
"""

from __future__ import annotations

from typing import Any, Optional


class OpexError(Exception):
    """Base class for every opex error."""


# ---------------------------------------------------------------------------
# Linear algebra and differentiation
# ---------------------------------------------------------------------------

class DimensionMismatch(OpexError):
    """Raised when an array shape does not match what the operation expects."""

    def __init__(self, expected: Any, got: Any, what: str = "input") -> None:
        self.expected = expected
        self.got      = got
        self.what     = what
        super().__init__(f"dimension mismatch for {what}: expected {expected}, got {got}")


class NotPSD(OpexError):
    """Raised when Cholesky factorisation fails even at the jitter cap."""

    def __init__(self, jitter: float) -> None:
        self.jitter = jitter
        super().__init__(f"matrix is not positive semi-definite (jitter reached {jitter:.1e})")


class NotSymmetric(OpexError):
    """Raised when a matrix expected to be symmetric is not."""

    def __init__(self, asymmetry: float) -> None:
        self.asymmetry = asymmetry
        super().__init__(f"matrix is not symmetric (max |A - A^T| = {asymmetry:.3e})")


class EigenFailure(OpexError):
    """Raised when the symmetric eigensolver does not converge."""

    def __init__(self, detail: str = "") -> None:
        self.detail = detail
        super().__init__(f"symmetric eigendecomposition failed: {detail}" if detail
                         else "symmetric eigendecomposition failed")


class NonFiniteGradient(OpexError):
    """Raised when a parameter gradient contains NaN or Inf."""

    def __init__(self, count: int) -> None:
        self.count = count
        super().__init__(f"gradient has {count} non-finite component(s)")


class UnsupportedActivationOrder(OpexError):
    """Raised when a non-smooth activation is asked for a second derivative."""

    def __init__(self, activation: str, order: int) -> None:
        self.activation = activation
        self.order      = order
        super().__init__(
            f"activation '{activation}' does not support input derivatives of order {order}"
        )


class LineSearchFailure(OpexError):
    """Raised when the Armijo backtracking search finds no acceptable step."""

    def __init__(self, iteration: int) -> None:
        self.iteration = iteration
        super().__init__(f"backtracking line search failed at iteration {iteration}")


# ---------------------------------------------------------------------------
# Fitting and training
# ---------------------------------------------------------------------------

class DegenerateFit(OpexError):
    """Raised when a regression has no spread in its abscissae."""

    def __init__(self, reason: str = "all abscissae are equal") -> None:
        self.reason = reason
        super().__init__(f"degenerate fit: {reason}")


class NonFiniteLoss(OpexError):
    """
    Raised when a training loss becomes NaN or Inf.

    The partial history recorded before the abort is kept on the
    exception so callers can inspect the run.
    """

    def __init__(self, iteration: int, history: Optional[Any] = None) -> None:
        self.iteration = iteration
        self.history   = history
        super().__init__(f"loss became non-finite at iteration {iteration}")


class DegenerateData(OpexError):
    """Raised when regression data cannot support the requested fit."""

    def __init__(self, reason: str) -> None:
        self.reason = reason
        super().__init__(f"degenerate data: {reason}")


class ZeroReference(OpexError):
    """Raised when a relative error is requested against an all-zero reference."""

    def __init__(self) -> None:
        super().__init__("reference has zero norm; relative error is undefined")


# ---------------------------------------------------------------------------
# Reference solvers
# ---------------------------------------------------------------------------

class StepFailure(OpexError):
    """Raised when an adaptive integrator cannot reach its tolerance."""

    def __init__(self, message: str) -> None:
        self.message = message
        super().__init__(f"integrator step failure: {message}")


class Instability(OpexError):
    """Raised when a time-stepping scheme blows up."""

    def __init__(self, norm: float, time: float) -> None:
        self.norm = norm
        self.time = time
        super().__init__(f"solution norm {norm:.3e} exceeded the stability bound at t={time:.4f}")


class CharacteristicEscape(OpexError):
    """Raised when a characteristic can leave the domain through the wrong side."""

    def __init__(self, min_speed: float) -> None:
        self.min_speed = min_speed
        super().__init__(f"advection speed must be positive everywhere (min {min_speed:.3e})")


class PhysicsUnavailable(OpexError):
    """Raised when a physics-based method is asked of a problem without a residual."""

    def __init__(self, kind: str) -> None:
        self.kind = kind
        super().__init__(f"problem '{kind}' has no residual operator; use a data-only method")


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

class ManifestMismatch(OpexError):
    """Raised when a container manifest does not describe the expected payload."""

    def __init__(self, reason: str) -> None:
        self.reason = reason
        super().__init__(f"manifest mismatch: {reason}")


class ChecksumFailure(OpexError):
    """Raised when a container blob is truncated or an array fails its CRC32."""

    def __init__(self, array: str, expected: int, got: int) -> None:
        self.array    = array
        self.expected = expected
        self.got      = got
        super().__init__(
            f"checksum failure for '{array}': expected {expected:#010x}, got {got:#010x}"
        )
