"""Rollout-defined barrier function H, its gradient, and its rate.

H(x) is the supremum of the position constraint along the retreat
closed-loop flow started at x. It is computed on a fixed-step 4th-order
grid with an early-stop rule (the retreat flow eventually recedes, so a
sustained monotone decrease ends the rollout), then sharpened around the
best grid sample with a three-point quadratic fit.

The gradient is obtained from the variational (sensitivity) system
Phi' = J_cl(y(t)) Phi integrated on the same grid: the directional
products J_cl @ phi_j are formed by central differences of the closed-loop
field along each (normalized) sensitivity column, so no analytic Jacobian
of the maneuver is ever required. At the maximizer,
grad H = grad_h(r(t*))^T Phi_r(t*).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import (
    ContractViolationError,
    DomainError,
    RolloutError,
    SafetyModelError,
)
from .evading import EvadingConfig, closed_loop_field
from .model import ConstraintSet, SystemModel

GRAD_SMALL_TOL = 1e-8


@dataclass(frozen=True)
class ZcbfConfig:
    """Rollout horizon, grid step, and early-stop/diagnostic parameters.

    The supremum over all forward time is approximated on [0, t_max]; any
    truncation where the maximum lands on the final sample without the
    early stop having fired is reported on the evaluation. ``dwell`` is the
    duration of sustained monotone decrease (with a negative constraint
    rate) that ends the rollout early.
    """

    t_max: float
    dt: float = 0.01
    dwell: float = 1.0
    integrator: str = "rk4"  # fixed-step, 4th order; the only supported marker
    fd_step: float = 1e-6
    switch_rtol: float = 1e-6

    def __post_init__(self):
        if self.t_max <= 0.0 or self.dt <= 0.0 or self.dt > self.t_max:
            raise ContractViolationError(
                f"need 0 < dt <= t_max, got dt = {self.dt}, t_max = {self.t_max}"
            )
        if self.integrator != "rk4":
            raise ContractViolationError(
                f"unsupported integrator marker {self.integrator!r}"
            )


@dataclass
class Rollout:
    """Sampled retreat flow: times, states, constraint values.

    ``domain_truncated`` marks a flow that left the modeled region (where
    the field is undefined); the recorded samples stop at the last valid
    state and any maximum over them is a lower bound on the supremum.
    """

    t: np.ndarray
    y: np.ndarray
    h: np.ndarray
    early_stopped: bool
    domain_truncated: bool = False


@dataclass
class ZcbfEvaluation:
    """Barrier value at one state, with maximizer and diagnostics.

    ``grad`` is filled only when the evaluation was run with sensitivities.
    ``switching`` flags two near-equal distinct maximizers (H is then not
    differentiable; the gradient reported is the earliest-maximizer one).
    ``horizon_warning`` flags a supremum attained at the truncated horizon,
    in which case H is a lower bound on the true value.
    """

    h_value: float
    t_star: float
    rollout: Rollout
    grad: Optional[np.ndarray] = None
    switching: bool = False
    horizon_warning: bool = False
    grad_small: bool = False
    extras: dict = field(default_factory=dict)

    @property
    def inside(self) -> bool:
        return self.h_value <= 0.0


def _rk4_step(f, y, dt):
    k1 = f(y)
    k2 = f(y + (0.5 * dt) * k1)
    k3 = f(y + (0.5 * dt) * k2)
    k4 = f(y + dt * k3)
    return y + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def rk4_trajectory(f, y0, dt, n_steps):
    """Dense fixed-step integration, returning all n_steps+1 samples."""
    y = np.asarray(y0, dtype=float)
    out = np.empty((n_steps + 1,) + y.shape)
    out[0] = y
    for k in range(n_steps):
        y = _rk4_step(f, y, dt)
        out[k + 1] = y
    return out

def _resolve_field(model, constraints, evading_cfg, field_fn):
    if field_fn is not None:
        return field_fn
    return closed_loop_field(model, constraints, evading_cfg)


def rollout_flow(model: SystemModel, constraints: ConstraintSet,
                 evading_cfg: EvadingConfig, zcbf_cfg: ZcbfConfig,
                 x: np.ndarray, field_fn: Callable = None) -> Rollout:
    """Integrate the retreat closed loop from x and record h_r along it.

    Stops early once h_r has decreased strictly monotonically for the
    configured dwell time and the exact constraint rate at the current
    sample is negative. Authority violations along the way are re-raised
    as RolloutError carrying the offending time and channel.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or x.shape[0] != model.dim:
        raise ContractViolationError("rollout expects a single (n+m,) state")
    if not np.all(np.isfinite(x)):
        raise ContractViolationError("rollout start state must be finite")
    f = _resolve_field(model, constraints, evading_cfg, field_fn)
    dt = zcbf_cfg.dt
    n_max = int(round(zcbf_cfg.t_max / dt))
    dwell_steps = max(1, int(round(zcbf_cfg.dwell / dt)))

    ys = np.empty((n_max + 1, model.dim))
    hs = np.empty(n_max + 1)
    ys[0] = x
    hs[0] = float(constraints.rd2.value(x[: model.n]))
    y = x
    decreasing = 0
    early = False
    truncated = False
    n_done = n_max
    for k in range(n_max):
        try:
            y = _rk4_step(f, y, dt)
        except DomainError:
            # flow left the modeled region; keep the valid prefix, flagged
            n_done = k
            truncated = True
            break
        except SafetyModelError as exc:
            raise RolloutError(k * dt, exc) from exc
        if not np.all(np.isfinite(y)):
            n_done = k
            truncated = True
            break
        ys[k + 1] = y
        hs[k + 1] = float(constraints.rd2.value(y[: model.n]))
        decreasing = decreasing + 1 if hs[k + 1] < hs[k] else 0
        if decreasing >= dwell_steps:
            from .model import hr_dot

            if float(hr_dot(model, constraints, y)) < 0.0:
                n_done = k + 1
                early = True
                break
    t = np.arange(n_done + 1) * dt
    return Rollout(t=t, y=ys[: n_done + 1], h=hs[: n_done + 1],
                   early_stopped=early, domain_truncated=truncated)


def _refine_max(t, h, k):
    """Quadratic fit through samples k-1, k, k+1; returns (t*, h*)."""
    if k == 0 or k == len(h) - 1:
        return float(t[k]), float(h[k])
    denom = h[k - 1] - 2.0 * h[k] + h[k + 1]
    if denom >= -1e-300:  # flat or non-concave triple: keep the grid sample
        return float(t[k]), float(h[k])
    s = 0.5 * (h[k - 1] - h[k + 1]) / denom
    s = float(np.clip(s, -0.5, 0.5))
    dt = t[1] - t[0]
    h_ref = h[k] + 0.5 * s * (h[k + 1] - h[k - 1]) + 0.5 * s * s * denom
    return float(t[k] + s * dt), float(max(h_ref, h[k]))


def _local_maxima(h):
    """Indices of local maxima of the sampled sequence, endpoints included."""
    n = len(h)
    if n == 1:
        return [0]
    out = []
    if h[0] >= h[1]:
        out.append(0)
    for k in range(1, n - 1):
        if h[k] >= h[k - 1] and h[k] >= h[k + 1] and (h[k] > h[k - 1] or h[k] > h[k + 1]):
            out.append(k)
    if h[-1] >= h[-2]:
        out.append(n - 1)
    return out or [int(np.argmax(h))]


def _detect_switching(ro: Rollout, zcbf_cfg: ZcbfConfig) -> bool:
    """True when two distinct local maximizers agree to the flag tolerance.

    Adjacent plateau samples refine to the same maximizer; the comparison
    is against the best candidate more than one grid step away.
    """
    cands = _local_maxima(ro.h)
    if len(cands) < 2:
        return False
    refined = sorted((_refine_max(ro.t, ro.h, k) for k in cands),
                     key=lambda th: -th[1])
    tb, hb = refined[0]
    for t2, h2 in refined[1:]:
        if abs(t2 - tb) > zcbf_cfg.dt:
            scale = max(abs(hb), 1e-9)
            return abs(hb - h2) <= zcbf_cfg.switch_rtol * scale
    return False


def eval_H(model: SystemModel, constraints: ConstraintSet,
           evading_cfg: EvadingConfig, zcbf_cfg: ZcbfConfig,
           x: np.ndarray, field_fn: Callable = None) -> ZcbfEvaluation:
    """Barrier value H(x) = max of h_r along the retreat flow.

    The earliest maximizer is taken on ties, refined to sub-grid accuracy
    with a local quadratic fit. Two distinct near-equal maximizers set the
    ``switching`` flag (H is not differentiable there).
    """
    ro = rollout_flow(model, constraints, evading_cfg, zcbf_cfg, x, field_fn)
    k_best = int(np.argmax(ro.h))  # argmax returns the earliest on ties
    t_star, h_star = _refine_max(ro.t, ro.h, k_best)
    horizon_warning = ro.domain_truncated or (
        (not ro.early_stopped) and k_best == len(ro.h) - 1)
    return ZcbfEvaluation(
        h_value=h_star,
        t_star=t_star,
        rollout=ro,
        switching=_detect_switching(ro, zcbf_cfg),
        horizon_warning=horizon_warning,
    )


def _sensitivity_rollout(model, constraints, evading_cfg, zcbf_cfg, x, field_fn):
    """Rollout that also integrates the sensitivity matrix on the same grid.

    State and sensitivity advance together under one RK4 scheme; each stage
    needs the field value and the products J_cl @ phi_j, both obtained from
    a single batched field call via directional central differences along
    the sensitivity columns. Column norms (used to keep the difference step
    well scaled as sensitivities grow) are refreshed once per step; within
    a step they drift only O(dt).
    """
    x = np.asarray(x, dtype=float)
    f = _resolve_field(model, constraints, evading_cfg, field_fn)
    dt = zcbf_cfg.dt
    nx = model.dim
    n_max = int(round(zcbf_cfg.t_max / dt))
    dwell_steps = max(1, int(round(zcbf_cfg.dwell / dt)))
    fd = zcbf_cfg.fd_step

    pts = np.empty((1 + 2 * nx, nx))
    col_scale = np.ones(nx)  # refreshed per step

    def stage(y, phi):
        pts[0] = y
        scaled = phi * (fd / col_scale)
        pts[1:1 + nx] = y + scaled.T
        pts[1 + nx:] = y - scaled.T
        vals = f(pts)
        ydot = vals[0]
        phidot = (vals[1:1 + nx] - vals[1 + nx:]).T * (col_scale / (2.0 * fd))
        return ydot, phidot

    ys = np.empty((n_max + 1, nx))
    phis = np.empty((n_max + 1, nx, nx))
    hs = np.empty(n_max + 1)
    y = x.copy()
    phi = np.eye(nx)
    ys[0], phis[0] = y, phi
    hs[0] = float(constraints.rd2.value(x[: model.n]))
    decreasing = 0
    early = False
    truncated = False
    n_done = n_max
    for k in range(n_max):
        np.sqrt(np.einsum("ij,ij->j", phi, phi), out=col_scale)
        np.maximum(col_scale, 1e-12, out=col_scale)
        try:
            k1y, k1p = stage(y, phi)
            k2y, k2p = stage(y + 0.5 * dt * k1y, phi + 0.5 * dt * k1p)
            k3y, k3p = stage(y + 0.5 * dt * k2y, phi + 0.5 * dt * k2p)
            k4y, k4p = stage(y + dt * k3y, phi + dt * k3p)
        except DomainError:
            n_done = k
            truncated = True
            break
        except SafetyModelError as exc:
            raise RolloutError(k * dt, exc) from exc
        y_next = y + (dt / 6.0) * (k1y + 2 * k2y + 2 * k3y + k4y)
        phi_next = phi + (dt / 6.0) * (k1p + 2 * k2p + 2 * k3p + k4p)
        if not (np.all(np.isfinite(y_next)) and np.all(np.isfinite(phi_next))):
            n_done = k
            truncated = True
            break
        y, phi = y_next, phi_next
        ys[k + 1], phis[k + 1] = y, phi
        hs[k + 1] = float(constraints.rd2.value(y[: model.n]))
        decreasing = decreasing + 1 if hs[k + 1] < hs[k] else 0
        if decreasing >= dwell_steps:
            from .model import hr_dot

            if float(hr_dot(model, constraints, y)) < 0.0:
                n_done = k + 1
                early = True
                break
    t = np.arange(n_done + 1) * dt

    def partial(k, s):
        """One RK4 step of length s from grid node k (sub-grid maximizer)."""
        y0, p0 = ys[k], phis[k]
        k1y, k1p = stage(y0, p0)
        k2y, k2p = stage(y0 + 0.5 * s * k1y, p0 + 0.5 * s * k1p)
        k3y, k3p = stage(y0 + 0.5 * s * k2y, p0 + 0.5 * s * k2p)
        k4y, k4p = stage(y0 + s * k3y, p0 + s * k3p)
        return (y0 + (s / 6.0) * (k1y + 2 * k2y + 2 * k3y + k4y),
                p0 + (s / 6.0) * (k1p + 2 * k2p + 2 * k3p + k4p))

    ro = Rollout(t=t, y=ys[: n_done + 1], h=hs[: n_done + 1],
                 early_stopped=early, domain_truncated=truncated)
    return ro, phis[: n_done + 1], partial


def evaluate(model: SystemModel, constraints: ConstraintSet,
             evading_cfg: EvadingConfig, zcbf_cfg: ZcbfConfig,
             x: np.ndarray, with_gradient: bool = True,
             field_fn: Callable = None) -> ZcbfEvaluation:
    """Single-rollout evaluation of H and (optionally) its gradient.

    This is what the filter calls once per control step.
    """
    if not with_gradient:
        return eval_H(model, constraints, evading_cfg, zcbf_cfg, x, field_fn)
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or x.shape[0] != model.dim:
        raise ContractViolationError("expected a single (n+m,) state")
    ro, phis, partial = _sensitivity_rollout(
        model, constraints, evading_cfg, zcbf_cfg, x, field_fn)
    k_best = int(np.argmax(ro.h))
    t_star, h_star = _refine_max(ro.t, ro.h, k_best)

    if t_star <= 0.0:
        grad = np.zeros(model.dim)
        grad[: model.n] = constraints.rd2.gradient(x[: model.n])
    else:
        dt = zcbf_cfg.dt
        k_base = min(int(math.floor(t_star / dt + 1e-12)), len(ro.t) - 1)
        s = t_star - ro.t[k_base]
        if s > 1e-14:
            y_star, phi_star = partial(k_base, s)
        else:
            y_star, phi_star = ro.y[k_base], phis[k_base]
        gh = constraints.rd2.gradient(y_star[: model.n])
        grad = gh @ phi_star[: model.n, :]

    horizon_warning = ro.domain_truncated or (
        (not ro.early_stopped) and k_best == len(ro.h) - 1)
    return ZcbfEvaluation(
        h_value=h_star,
        t_star=t_star,
        rollout=ro,
        grad=grad,
        switching=_detect_switching(ro, zcbf_cfg),
        horizon_warning=horizon_warning,
        grad_small=bool(np.linalg.norm(grad) < GRAD_SMALL_TOL),
    )


def grad_H(model: SystemModel, constraints: ConstraintSet,
           evading_cfg: EvadingConfig, zcbf_cfg: ZcbfConfig,
           x: np.ndarray, field_fn: Callable = None) -> np.ndarray:
    """Gradient of H at x via the variational system (see module docstring)."""
    return evaluate(model, constraints, evading_cfg, zcbf_cfg, x,
                    with_gradient=True, field_fn=field_fn).grad


def H_dot(model: SystemModel, zcbf_eval: ZcbfEvaluation, x: np.ndarray,
          u: np.ndarray) -> float:
    """Rate of H under input u: grad_H^T (f(x) + g(x) u). Affine in u."""
    if zcbf_eval.grad is None:
        raise ContractViolationError("evaluation has no gradient; run evaluate()")
    from .model import eval_dynamics

    return float(zcbf_eval.grad @ eval_dynamics(model, x, u))


def zcbf_margin(model: SystemModel, zcbf_eval: ZcbfEvaluation, x: np.ndarray,
                u: np.ndarray, alpha_gain: float) -> float:
    """Slack of the barrier decay condition with a linear class-K rate:
    alpha_gain * (-H) - H_dot(x, u). Nonnegative iff the condition holds."""
    if alpha_gain <= 0.0:
        raise ContractViolationError(f"alpha_gain must be > 0, got {alpha_gain}")
    return alpha_gain * (-zcbf_eval.h_value) - H_dot(model, zcbf_eval, x, u)
