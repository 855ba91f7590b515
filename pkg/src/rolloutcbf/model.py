"""System class, constraint functions, and the modified-input algebra.

The system is second-order control-affine: positions r (n of them) with
relative degree 2 and velocities v (m of them) with relative degree 1,

    d/dt [r; v] = [f_r(x); f_v(x) + g(x) u],    g = diag(g_v_1 .. g_v_m).

A scalar position constraint h_r(r) <= 0 defines the position safe set,
the first c velocity channels carry box constraints, and the inputs carry
box constraints. Everything downstream (maneuver, barrier rollout, filter)
is built from the operations in this module.

All model callables must broadcast over leading axes: states may be passed
as (n+m,) vectors or (..., n+m) batches. Operations are pure functions of
immutable inputs and safe to call concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from . import numdiff
from .errors import (
    AssumptionViolationError,
    ContractViolationError,
    EpsilonTooLargeError,
    SingularChannelError,
)

# Channels with |g_v_i| below this lose control authority (strict-inequality
# assumption made testable).
G_SINGULARITY_TOL = 1e-9


@dataclass(frozen=True)
class SystemModel:
    """Second-order control-affine dynamics with diagonal input map.

    f_r maps the full state to the n position derivatives, f_v to the m
    velocity drift terms, and g_diag to the m diagonal entries of the input
    map. Analytic Jacobians (each with respect to the full state, shapes
    (n, n+m) and (m, n+m)) are optional; central differences are used when
    they are absent. All callables must be deterministic and broadcast over
    leading batch axes.
    """

    n: int
    m: int
    f_r: Callable[[np.ndarray], np.ndarray]
    f_v: Callable[[np.ndarray], np.ndarray]
    g_diag: Callable[[np.ndarray], np.ndarray]
    jac_f_r: Optional[Callable[[np.ndarray], np.ndarray]] = None
    jac_f_v: Optional[Callable[[np.ndarray], np.ndarray]] = None
    jac_g_diag: Optional[Callable[[np.ndarray], np.ndarray]] = None
    g_tol: float = G_SINGULARITY_TOL

    def __post_init__(self):
        if self.n < 1 or self.m < 1:
            raise ContractViolationError("n and m must be >= 1")

    @property
    def dim(self) -> int:
        return self.n + self.m

    def split(self, x: np.ndarray):
        """Split a state (or batch) into its (r, v) blocks."""
        x = np.asarray(x, dtype=float)
        return x[..., : self.n], x[..., self.n:]

    def d_f_r_d_v(self, x: np.ndarray) -> np.ndarray:
        """Partial of f_r with respect to the velocity block, (..., n, m)."""
        if self.jac_f_r is not None:
            return np.asarray(self.jac_f_r(x), dtype=float)[..., :, self.n:]
        return numdiff.jacobian(self.f_r, np.asarray(x, dtype=float))[..., :, self.n:]


@dataclass(frozen=True)
class RD2Constraint:
    """Scalar position constraint h_r(r) <= 0 with its gradient.

    ``grad`` is optional (central differences otherwise); ``hess`` enables
    the analytic second-Lie-derivative path.
    """

    h: Callable[[np.ndarray], np.ndarray]
    grad: Optional[Callable[[np.ndarray], np.ndarray]] = None
    hess: Optional[Callable[[np.ndarray], np.ndarray]] = None

    def value(self, r: np.ndarray) -> np.ndarray:
        return np.asarray(self.h(r), dtype=float)

    def gradient(self, r: np.ndarray) -> np.ndarray:
        if self.grad is not None:
            return np.asarray(self.grad(r), dtype=float)
        return numdiff.gradient(self.h, np.asarray(r, dtype=float))


@dataclass(frozen=True)
class ConstraintSet:
    """Position constraint, velocity boxes on the first c channels, input box.

    Velocity channels are ordered so the box-constrained ones come first
    (indices 0..c-1); scenario builders permute their natural ordering into
    this convention. Derived half-width and center vectors are cached at
    construction.
    """

    rd2: RD2Constraint
    c: int
    v_min: np.ndarray
    v_max: np.ndarray
    u_min: np.ndarray
    u_max: np.ndarray
    v_half: np.ndarray = field(init=False, repr=False)
    v_center: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        v_min = np.atleast_1d(np.asarray(self.v_min, dtype=float))
        v_max = np.atleast_1d(np.asarray(self.v_max, dtype=float))
        u_min = np.atleast_1d(np.asarray(self.u_min, dtype=float))
        u_max = np.atleast_1d(np.asarray(self.u_max, dtype=float))
        if self.c < 0 or v_min.shape != (self.c,) or v_max.shape != (self.c,):
            raise ContractViolationError(
                f"v_min/v_max must have shape ({self.c},) to match c"
            )
        if u_min.shape != u_max.shape or u_min.ndim != 1:
            raise ContractViolationError("u_min/u_max must be 1-D and same shape")
        if np.any(v_min >= v_max):
            bad = int(np.argmax(v_min >= v_max))
            raise ContractViolationError(
                f"velocity box empty on channel {bad}: "
                f"v_min = {v_min[bad]} >= v_max = {v_max[bad]}"
            )
        if np.any(u_min >= u_max):
            bad = int(np.argmax(u_min >= u_max))
            raise ContractViolationError(
                f"input box empty on channel {bad}: "
                f"u_min = {u_min[bad]} >= u_max = {u_max[bad]}"
            )
        object.__setattr__(self, "v_min", v_min)
        object.__setattr__(self, "v_max", v_max)
        object.__setattr__(self, "u_min", u_min)
        object.__setattr__(self, "u_max", u_max)
        object.__setattr__(self, "v_half", (v_max - v_min) / 2.0)
        object.__setattr__(self, "v_center", (v_max + v_min) / 2.0)

    @property
    def m(self) -> int:
        return self.u_min.shape[0]

    def without_rd1(self) -> "ConstraintSet":
        """Copy with all velocity boxes dropped (c = 0)."""
        return replace(self, c=0, v_min=np.empty(0), v_max=np.empty(0))

    def u_clip(self, u: np.ndarray) -> np.ndarray:
        return np.clip(u, self.u_min, self.u_max)

    def u_contains(self, u: np.ndarray, tol: float = 0.0) -> bool:
        u = np.asarray(u, dtype=float)
        return bool(np.all(u >= self.u_min - tol) and np.all(u <= self.u_max + tol))


def _check_state(model: SystemModel, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != model.dim:
        raise ContractViolationError(
            f"state has {x.shape[-1]} entries, expected n+m = {model.dim}"
        )
    return x


def _check_input(model: SystemModel, u: np.ndarray) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    if u.shape[-1] != model.m:
        raise ContractViolationError(
            f"input has {u.shape[-1]} entries, expected m = {model.m}"
        )
    return u


def _checked_g(model: SystemModel, x: np.ndarray) -> np.ndarray:
    g = np.asarray(model.g_diag(x), dtype=float)
    small = np.abs(g) < model.g_tol
    if np.any(small):
        flat = np.argwhere(small)
        i = int(flat[0][-1])
        raise SingularChannelError(i, float(np.asarray(g)[tuple(flat[0])]), model.g_tol)
    return g


def eval_dynamics(model: SystemModel, x: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Full state derivative [f_r(x); f_v(x) + g(x) u]."""
    x = _check_state(model, x)
    u = _check_input(model, u)
    fr = np.asarray(model.f_r(x), dtype=float)
    fv = np.asarray(model.f_v(x), dtype=float)
    g = np.asarray(model.g_diag(x), dtype=float)
    return np.concatenate([fr, fv + g * u], axis=-1)


def modified_input(model: SystemModel, x: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Drift-compensated input: u_tilde_i = f_v_i/g_v_i + u_i.

    Under it each velocity derivative factors as v_i' = g_v_i * u_tilde_i,
    so one input channel steers exactly one velocity channel.
    """
    x = _check_state(model, x)
    u = _check_input(model, u)
    g = _checked_g(model, x)
    fv = np.asarray(model.f_v(x), dtype=float)
    return fv / g + u


def mu_nu(model: SystemModel, constraints: ConstraintSet, x: np.ndarray,
          check: bool = True):
    """Admissible modified-input range per channel: -mu_i <= u_tilde_i <= nu_i.

    mu_i = -u_min_i - f_v_i/g_v_i and nu_i = u_max_i + f_v_i/g_v_i. With
    ``check`` (the default), a channel with mu_i <= 0 or nu_i <= 0 raises
    AssumptionViolationError rather than being clipped; pass check=False to
    obtain raw values for audit reports.
    """
    x = _check_state(model, x)
    g = _checked_g(model, x)
    drift = np.asarray(model.f_v(x), dtype=float) / g
    mu = -constraints.u_min - drift
    nu = constraints.u_max + drift
    if check:
        bad = (mu <= 0.0) | (nu <= 0.0)
        if np.any(bad):
            flat = np.argwhere(bad)[0]
            i = int(flat[-1])
            raise AssumptionViolationError(
                i, float(mu[tuple(flat)]), float(nu[tuple(flat)])
            )
    return mu, nu


def smooth_input_cap(model: SystemModel, constraints: ConstraintSet,
                     x: np.ndarray, eps: float) -> np.ndarray:
    """Smooth approximation of min(mu, nu), strictly between 0 and the min.

    cap_i = (mu_i + nu_i - sqrt((mu_i - nu_i)^2 + eps)) / 2. Positivity
    requires eps < 4*mu_i*nu_i at the evaluated state; violations raise
    EpsilonTooLargeError naming the channel.
    """
    if eps <= 0.0:
        raise ContractViolationError(f"eps must be > 0, got {eps}")
    mu, nu = mu_nu(model, constraints, x)
    bound = 4.0 * mu * nu
    bad = eps >= bound
    if np.any(bad):
        flat = np.argwhere(bad)[0]
        i = int(flat[-1])
        raise EpsilonTooLargeError(i, eps, float(bound[tuple(flat)]))
    return 0.5 * (mu + nu - np.sqrt((mu - nu) ** 2 + eps))


def hr_dot(model: SystemModel, constraints: ConstraintSet,
           x: np.ndarray) -> np.ndarray:
    """First derivative of the position constraint along the drift.

    Input-independent because the constraint has relative degree two:
    hr_dot(x) = grad_h(r)^T f_r(x).
    """
    x = _check_state(model, x)
    r, _ = model.split(x)
    grad = constraints.rd2.gradient(r)
    fr = np.asarray(model.f_r(x), dtype=float)
    return np.sum(grad * fr, axis=-1)


def d_coeffs(model: SystemModel, constraints: ConstraintSet,
             x: np.ndarray) -> np.ndarray:
    """Input-sensitivity coefficients of the second constraint derivative.

    d_i(x) = (grad_h(r)^T d f_r/d v_i) * g_v_i(x); the second derivative of
    h_r is affine in u with slope d.
    """
    x = _check_state(model, x)
    r, _ = model.split(x)
    grad = constraints.rd2.gradient(r)
    dfr_dv = model.d_f_r_d_v(x)
    g = _checked_g(model, x)
    return np.einsum("...n,...nm->...m", grad, dfr_dv) * g


def rd2_derivatives(model: SystemModel, constraints: ConstraintSet,
                    x: np.ndarray, u: np.ndarray):
    """Constraint value and first two time derivatives: (h, h', h'').

    h' is independent of u; h''(x, u) = L_f^2 h + sum_i d_i(x) u_i. The
    drift term uses the analytic chain rule when the position-constraint
    Hessian and model Jacobians are supplied, nested central differences of
    h' otherwise.
    """
    x = _check_state(model, x)
    u = _check_input(model, u)
    r, _ = model.split(x)
    h = constraints.rd2.value(r)
    hd = hr_dot(model, constraints, x)
    squeeze = x.ndim == 1
    xb = np.atleast_2d(x)

    if (constraints.rd2.hess is not None and model.jac_f_r is not None):
        rb = xb[..., : model.n]
        grad = constraints.rd2.gradient(rb)
        hess = np.asarray(constraints.rd2.hess(rb), dtype=float)
        fr = np.asarray(model.f_r(xb), dtype=float)
        jfr = np.asarray(model.jac_f_r(xb), dtype=float)
        # d(hdot)/dx = f_r^T hess d r/d x + grad^T d f_r/d x, r-rows only in
        # the first term.
        dhd_dx = np.einsum("...n,...nk->...k", grad, jfr)
        dhd_dx[..., : model.n] += np.einsum("...n,...nk->...k", fr, hess)
    else:
        def hdot_fn(pts):
            return hr_dot(model, constraints, pts)

        dhd_dx = numdiff.gradient(hdot_fn, xb)

    fv = np.asarray(model.f_v(xb), dtype=float)
    frb = np.asarray(model.f_r(xb), dtype=float)
    drift_full = np.concatenate([frb, fv], axis=-1)
    lf2 = np.sum(dhd_dx * drift_full, axis=-1)
    d = d_coeffs(model, constraints, xb)
    hdd = lf2 + np.sum(d * np.atleast_2d(u), axis=-1)
    if squeeze:
        hdd = hdd[0]
    return h, hd, hdd


def rd1_value(constraints: ConstraintSet, v: np.ndarray, i: int) -> np.ndarray:
    """Box-constraint function for velocity channel i (0-based, i < c).

    (v_i - center_i)^2 - half_i^2: zero exactly on the box faces, negative
    inside.
    """
    if not 0 <= i < constraints.c:
        raise ContractViolationError(
            f"channel {i} out of range: {constraints.c} box-constrained channels"
        )
    v = np.asarray(v, dtype=float)
    dv = v[..., i] - constraints.v_center[i]
    return dv * dv - constraints.v_half[i] ** 2


def rd1_values(constraints: ConstraintSet, v: np.ndarray) -> np.ndarray:
    """All c box-constraint values at once, shape (..., c)."""
    v = np.asarray(v, dtype=float)
    dv = v[..., : constraints.c] - constraints.v_center
    return dv * dv - constraints.v_half**2


def assumption_margins(model: SystemModel, constraints: ConstraintSet,
                       x: np.ndarray, eps: float):
    """Raw audit quantities at x: (|g|, mu, nu, 4*mu*nu - eps).

    Never raises on violated assumptions; used by the sampling audit. A
    channel with g_v_i = 0 exactly reports mu = nu = -inf so the audit
    fails visibly instead of dividing by zero.
    """
    x = _check_state(model, x)
    g_raw = np.asarray(model.g_diag(x), dtype=float)
    g = np.abs(g_raw)
    with np.errstate(divide="ignore", invalid="ignore"):
        drift = np.asarray(model.f_v(x), dtype=float) / g_raw
    mu = -constraints.u_min - drift
    nu = constraints.u_max + drift
    bad = ~np.isfinite(drift)
    mu = np.where(bad, -np.inf, mu)
    nu = np.where(bad, -np.inf, nu)
    return g, mu, nu, 4.0 * mu * nu - eps
