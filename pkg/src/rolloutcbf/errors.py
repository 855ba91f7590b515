"""Exception taxonomy for the safety-filter library.

Errors are split between contract violations (caller bugs: wrong shapes,
inadmissible arguments) and model-authority failures (the system loses
control authority at a state, so the maneuver and filter math is undefined
there). The latter always name the offending channel so a failed rollout
or audit can be traced to a concrete scalar condition.
"""

from __future__ import annotations


class SafetyModelError(Exception):
    """Base class for all library errors."""


class ContractViolationError(SafetyModelError, ValueError):
    """An argument violates a documented precondition (shape, range, type)."""


class DomainError(SafetyModelError):
    """A state is outside the region where the model functions are defined."""


class SingularChannelError(SafetyModelError):
    """Control authority lost: |g_v_i(x)| below the singularity tolerance."""

    def __init__(self, channel: int, value: float, tol: float):
        self.channel = channel
        self.value = value
        self.tol = tol
        super().__init__(
            f"input channel {channel} singular: |g_v| = {abs(value):.3e} < {tol:.1e}"
        )


class AssumptionViolationError(SafetyModelError):
    """Admissible modified-input range does not contain 0 on some channel.

    Raised when mu_i <= 0 or nu_i <= 0, i.e. the sign of the channel's
    velocity derivative can no longer be chosen freely.
    """

    def __init__(self, channel: int, mu: float, nu: float):
        self.channel = channel
        self.mu = mu
        self.nu = nu
        super().__init__(
            f"input-authority assumption violated on channel {channel}: "
            f"mu = {mu:.6g}, nu = {nu:.6g} (both must be > 0)"
        )


class EpsilonTooLargeError(SafetyModelError):
    """Smoothing epsilon exceeds 4*mu*nu, so the smooth cap may be <= 0."""

    def __init__(self, channel: int, eps: float, bound: float):
        self.channel = channel
        self.eps = eps
        self.bound = bound
        super().__init__(
            f"smoothing epsilon {eps:.3e} >= 4*mu*nu = {bound:.3e} "
            f"on channel {channel}; cap positivity not guaranteed"
        )


class TieError(SafetyModelError):
    """The bang-bang reference law is undefined because some d_i(x) = 0."""

    def __init__(self, channel: int):
        self.channel = channel
        super().__init__(f"d_{channel}(x) = 0: bang-bang input undefined")


class RolloutError(SafetyModelError):
    """A closed-loop rollout failed partway through.

    Carries the rollout time at which the underlying error occurred and,
    when the cause names one, the offending input channel.
    """

    def __init__(self, time: float, cause: Exception):
        self.time = time
        self.cause = cause
        self.channel = getattr(cause, "channel", None)
        at = f"t = {time:.6g}"
        if self.channel is not None:
            at += f", channel {self.channel}"
        super().__init__(f"rollout aborted at {at}: {cause}")


class ConfigError(SafetyModelError):
    """A configuration file or section failed schema validation."""


class SimAbort(SafetyModelError):
    """A simulation aborted mid-run; the partial log remains valid."""

    def __init__(self, message: str, log=None):
        self.log = log
        super().__init__(message)
