"""One-step safety filter with guaranteed fallback, plus the RD2-only
baseline used for comparison.

Each control period the filter projects a nominal input onto the set of
inputs that (a) stay in the input box, (b) satisfy the barrier decay
condition on the rollout ZCBF (affine in u), and (c) keep every
box-constrained velocity inside a slightly shrunk box after one explicit
Euler step of the constraint model. Constraint (c) is separable: each
channel reduces to a closed-form interval for one input coordinate, so the
whole problem collapses to a box-plus-one-affine QP solved exactly.

Whenever the QP solver fails (or is disabled) while the state is inside
the invariant set, the retreat maneuver u*(x) is returned instead; it is
feasible there by construction, which is what makes the scheme recursively
feasible. Outside the invariant set the filter degrades to a flagged
best-effort solve instead of raising.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional

import numpy as np

from .errors import ContractViolationError
from .evading import EvadingConfig, evading_input
from .model import ConstraintSet, SystemModel, eval_dynamics, rd1_values
from .qp import solve_box_affine_qp
from .zcbf import ZcbfConfig, ZcbfEvaluation, evaluate

# Active-set bitmask layout: bit 0 = ZCBF row, bits 1..c = velocity-box
# channels, bits 1+c .. c+m = input-box channels.
ACTIVE_ZCBF = 1


@dataclass(frozen=True)
class FilterConfig:
    """Weights and discretization of the one-step filter.

    r1 weights the distance to the nominal input (positive definite), r2
    the distance to the previous input (positive semidefinite, suppresses
    chattering). alpha_gain is the linear class-K rate of the barrier decay
    condition. dt is the Euler step of the constraint model, rd1_shrink the
    fraction of each velocity-box half-width enforced at the next step
    (absorbs the Euler-vs-continuous-plant mismatch).
    """

    r1: np.ndarray
    r2: np.ndarray
    alpha_gain: float = 1.0
    dt: float = 0.05
    rd1_shrink: float = 0.98
    feas_tol: float = 1e-9
    max_subproblems: int = 500
    membership_tol: float = 1e-6

    def __post_init__(self):
        r1 = np.asarray(self.r1, dtype=float)
        r2 = np.asarray(self.r2, dtype=float)
        if r1.ndim != 2 or r1.shape != r2.shape or r1.shape[0] != r1.shape[1]:
            raise ContractViolationError("r1/r2 must be square matrices of equal size")
        try:
            np.linalg.cholesky(r1)
        except np.linalg.LinAlgError as exc:
            raise ContractViolationError("r1 must be positive definite") from exc
        if np.min(np.linalg.eigvalsh((r2 + r2.T) / 2)) < -1e-10:
            raise ContractViolationError("r2 must be positive semidefinite")
        if self.alpha_gain <= 0.0:
            raise ContractViolationError("alpha_gain must be > 0")
        if self.dt <= 0.0:
            raise ContractViolationError("dt must be > 0")
        if not 0.0 < self.rd1_shrink <= 1.0:
            raise ContractViolationError("rd1_shrink must be in (0, 1]")
        object.__setattr__(self, "r1", r1)
        object.__setattr__(self, "r2", r2)

    @classmethod
    def identity(cls, m: int, r1: float = 1.0, r2: float = 0.1,
                 **kwargs) -> "FilterConfig":
        return cls(r1=r1 * np.eye(m), r2=r2 * np.eye(m), **kwargs)


class Membership(Enum):
    INSIDE = "inside"
    BOUNDARY = "boundary"
    OUTSIDE = "outside"


@dataclass
class MembershipResult:
    status: Membership
    margins: np.ndarray        # [H, h_v_1 .. h_v_c]; all <= -tol means inside
    zcbf_eval: ZcbfEvaluation

    @property
    def inside(self) -> bool:
        return self.status is Membership.INSIDE


@dataclass
class FilterResult:
    """Safe input plus solve diagnostics for one control step."""

    u_safe: np.ndarray
    used_fallback: bool
    active_set: int
    objective: float
    solve_time: float            # seconds, wall clock, QP + bookkeeping
    best_effort: bool = False
    zcbf_eval: Optional[ZcbfEvaluation] = None
    active_labels: tuple = field(default_factory=tuple)


def discrete_step(model: SystemModel, x: np.ndarray, u: np.ndarray,
                  dt: float) -> np.ndarray:
    """Constraint-model transition map: one explicit Euler step.

    The simulated plant integrates with a 4th-order method; this map is
    only the filter's internal prediction model.
    """
    if dt <= 0.0:
        raise ContractViolationError(f"dt must be > 0, got {dt}")
    return np.asarray(x, dtype=float) + dt * eval_dynamics(model, x, u)


def membership(model: SystemModel, constraints: ConstraintSet,
               evading_cfg: EvadingConfig, zcbf_cfg: ZcbfConfig,
               x: np.ndarray, tol: float = 1e-6,
               field_fn: Callable = None,
               zcbf_eval: Optional[ZcbfEvaluation] = None) -> MembershipResult:
    """Classify x against the invariant set (barrier + velocity boxes).

    Inside iff every margin is <= -tol; boundary iff the worst margin lies
    in [-tol, +tol]; outside otherwise.
    """
    x = np.asarray(x, dtype=float)
    if zcbf_eval is None:
        zcbf_eval = evaluate(model, constraints, evading_cfg, zcbf_cfg, x,
                             with_gradient=False, field_fn=field_fn)
    hv = rd1_values(constraints, x[model.n:])
    margins = np.concatenate([[zcbf_eval.h_value], hv])
    worst = float(np.max(margins))
    if worst <= -tol:
        status = Membership.INSIDE
    elif worst <= tol:
        status = Membership.BOUNDARY
    else:
        status = Membership.OUTSIDE
    return MembershipResult(status=status, margins=margins, zcbf_eval=zcbf_eval)


def _rd1_intervals(model, constraints, filter_cfg, x):
    """Per-channel input intervals enforcing the next-step velocity boxes.

    Channel i of the Euler step gives v_i + dt*(f_v_i + g_i u_i), which
    must land in the shrunk box; solving for u_i yields one interval per
    channel (orientation flips with the sign of g_i).
    """
    c = constraints.c
    if c == 0:
        return np.empty(0), np.empty(0)
    fv = np.asarray(model.f_v(x), dtype=float)[:c]
    g = np.asarray(model.g_diag(x), dtype=float)[:c]
    v = x[model.n: model.n + c]
    half = filter_cfg.rd1_shrink * constraints.v_half
    v_lo = constraints.v_center - half
    v_hi = constraints.v_center + half
    dt = filter_cfg.dt
    lo_rate = (v_lo - v) / dt - fv
    hi_rate = (v_hi - v) / dt - fv
    lo_u = np.where(g > 0, lo_rate / g, hi_rate / g)
    hi_u = np.where(g > 0, hi_rate / g, lo_rate / g)
    return lo_u, hi_u


def _zcbf_row(model, filter_cfg, x, zcbf_eval):
    """Affine barrier-decay row a^T u <= b at the current state."""
    grad = zcbf_eval.grad
    g = np.asarray(model.g_diag(x), dtype=float)
    fr = np.asarray(model.f_r(x), dtype=float)
    fv = np.asarray(model.f_v(x), dtype=float)
    drift_rate = float(grad[: model.n] @ fr + grad[model.n:] @ fv)
    a = grad[model.n:] * g
    b = filter_cfg.alpha_gain * (-zcbf_eval.h_value) - drift_rate
    return a, b


def _active_mask(constraints, u, lo_u, hi_u, a, b, sol, tol):
    """Bitmask + labels of constraints active at the solution."""
    c, m = constraints.c, constraints.m
    mask = 0
    labels = []
    if sol is not None and sol.affine_active or (
            a is not None and abs(float(a @ u) - b) <= tol * max(1.0, abs(b))):
        mask |= ACTIVE_ZCBF
        labels.append("zcbf")
    for i in range(c):
        span = max(1.0, abs(lo_u[i]), abs(hi_u[i]))
        if (abs(u[i] - lo_u[i]) <= tol * span or abs(u[i] - hi_u[i]) <= tol * span):
            mask |= 1 << (1 + i)
            labels.append(f"rd1_{i}")
    for i in range(m):
        span = max(1.0, abs(constraints.u_min[i]), abs(constraints.u_max[i]))
        if (abs(u[i] - constraints.u_min[i]) <= tol * span
                or abs(u[i] - constraints.u_max[i]) <= tol * span):
            mask |= 1 << (1 + c + i)
            labels.append(f"input_{i}")
    return mask, tuple(labels)


def solve_filter(model: SystemModel, constraints: ConstraintSet,
                 evading_cfg: EvadingConfig, zcbf_cfg: ZcbfConfig,
                 filter_cfg: FilterConfig, x: np.ndarray, u_nom: np.ndarray,
                 u_prev: np.ndarray, field_fn: Callable = None,
                 zcbf_eval: Optional[ZcbfEvaluation] = None,
                 disable_solver: bool = False) -> FilterResult:
    """Filter a nominal input through the one-step safety program.

    Minimizes ||u - u_nom||_R1^2 + ||u - u_prev||_R2^2 over the input box,
    the barrier decay row, and the per-channel next-step velocity boxes.
    If the QP reports infeasible (or ``disable_solver`` forces it) while
    the state is inside the invariant set, the retreat maneuver is returned
    with ``used_fallback`` set; outside, a flagged best-effort solution
    minimizing the worst violation is returned. Never raises for solver
    reasons.
    """
    t0 = time.perf_counter()
    x = np.asarray(x, dtype=float)
    u_nom = np.asarray(u_nom, dtype=float)
    u_prev = np.asarray(u_prev, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ContractViolationError("state must be finite")
    tol = filter_cfg.feas_tol
    if not constraints.u_contains(u_nom, tol=1e-9):
        raise ContractViolationError("nominal input outside the input box")
    if not constraints.u_contains(u_prev, tol=1e-9):
        raise ContractViolationError("previous input outside the input box")

    if zcbf_eval is None or zcbf_eval.grad is None:
        zcbf_eval = evaluate(model, constraints, evading_cfg, zcbf_cfg, x,
                             with_gradient=True, field_fn=field_fn)

    a, b = _zcbf_row(model, filter_cfg, x, zcbf_eval)
    lo_u, hi_u = _rd1_intervals(model, constraints, filter_cfg, x)
    lo = constraints.u_min.copy()
    hi = constraints.u_max.copy()
    c = constraints.c
    lo[:c] = np.maximum(lo[:c], lo_u)
    hi[:c] = np.minimum(hi[:c], hi_u)

    Q = 2.0 * (filter_cfg.r1 + filter_cfg.r2)
    q = 2.0 * (filter_cfg.r1 @ u_nom + filter_cfg.r2 @ u_prev)

    sol = None
    if not disable_solver:
        sol = solve_box_affine_qp(Q, q, lo, hi, a, b, tol=tol,
                                  max_subproblems=filter_cfg.max_subproblems)

    if sol is not None:
        offset = float(u_nom @ filter_cfg.r1 @ u_nom + u_prev @ filter_cfg.r2 @ u_prev)
        mask, labels = _active_mask(constraints, sol.u, lo_u, hi_u, a, b, sol, tol)
        return FilterResult(
            u_safe=sol.u, used_fallback=False, active_set=mask,
            objective=sol.objective + offset,
            solve_time=time.perf_counter() - t0,
            zcbf_eval=zcbf_eval, active_labels=labels,
        )

    member = membership(model, constraints, evading_cfg, zcbf_cfg, x,
                        tol=filter_cfg.membership_tol, zcbf_eval=zcbf_eval)
    if member.status is not Membership.OUTSIDE:
        u_star = evading_input(model, constraints, evading_cfg, x)
        du1 = u_star - u_nom
        du2 = u_star - u_prev
        obj = float(du1 @ filter_cfg.r1 @ du1 + du2 @ filter_cfg.r2 @ du2)
        mask, labels = _active_mask(constraints, u_star, lo_u, hi_u, a, b, None, tol)
        return FilterResult(
            u_safe=u_star, used_fallback=True, active_set=mask,
            objective=obj, solve_time=time.perf_counter() - t0,
            zcbf_eval=zcbf_eval, active_labels=labels,
        )

    return _best_effort(model, constraints, evading_cfg, filter_cfg, x,
                        u_nom, u_prev, lo, hi, lo_u, hi_u, a, b, Q, q,
                        zcbf_eval, t0)


def _best_effort(model, constraints, evading_cfg, filter_cfg, x, u_nom,
                 u_prev, lo, hi, lo_u, hi_u, a, b, Q, q, zcbf_eval, t0):
    """Outside the invariant set: minimize the worst violation first, then
    the objective over the still-satisfiable constraints. Flagged, never
    raises."""
    tol = filter_cfg.feas_tol
    # velocity intervals disjoint from the input box: pin the channel to the
    # box endpoint nearest the interval (smallest violation on that channel)
    lo_fix = lo.copy()
    hi_fix = hi.copy()
    for i in range(constraints.c):
        if lo_fix[i] > hi_fix[i]:
            if lo_u[i] > constraints.u_max[i]:
                lo_fix[i] = hi_fix[i] = constraints.u_max[i]
            else:
                lo_fix[i] = hi_fix[i] = constraints.u_min[i]
    # if the decay row cannot be met over the box, relax it to its best value
    b_eff = b
    if a is not None and np.any(a != 0.0):
        box_min = float(np.where(a > 0, lo_fix, hi_fix) @ a)
        if box_min > b:
            b_eff = box_min
    sol = solve_box_affine_qp(Q, q, lo_fix, hi_fix, a, b_eff, tol=tol,
                              max_subproblems=filter_cfg.max_subproblems)
    if sol is None:
        u = np.clip(u_nom, lo_fix, hi_fix)  # last resort, still inside the box
        objective = float((u - u_nom) @ filter_cfg.r1 @ (u - u_nom)
                          + (u - u_prev) @ filter_cfg.r2 @ (u - u_prev))
    else:
        u = sol.u
        offset = float(u_nom @ filter_cfg.r1 @ u_nom + u_prev @ filter_cfg.r2 @ u_prev)
        objective = sol.objective + offset
    mask, labels = _active_mask(constraints, u, lo_u, hi_u, a, b, sol, tol)
    return FilterResult(
        u_safe=u, used_fallback=False, active_set=mask, objective=objective,
        solve_time=time.perf_counter() - t0, best_effort=True,
        zcbf_eval=zcbf_eval, active_labels=labels,
    )


def baseline_filter(model: SystemModel, constraints: ConstraintSet,
                    evading_cfg: EvadingConfig, zcbf_cfg: ZcbfConfig,
                    filter_cfg: FilterConfig, x: np.ndarray,
                    u_nom: np.ndarray, field_fn: Callable = None,
                    zcbf_eval: Optional[ZcbfEvaluation] = None) -> FilterResult:
    """RD2-only comparison filter: barrier and input box, nothing else.

    Expects an evading config that treats every channel as unconstrained
    (its k_free covers all m channels); the velocity boxes are dropped both
    from the maneuver (so the barrier is the RD2-only one) and from the
    program, and the chattering term is removed. This mirrors a
    single-constraint rollout-ZCBF controller made continuously
    differentiable by the same smooth maneuver.
    """
    if evading_cfg.c != 0 or evading_cfg.k_free.shape[0] != constraints.m:
        raise ContractViolationError(
            "baseline filter needs an all-unconstrained evading config "
            f"(k_free per input channel; got c = {evading_cfg.c})"
        )
    free_constraints = constraints.without_rd1()
    base_cfg = FilterConfig(
        r1=filter_cfg.r1, r2=np.zeros_like(filter_cfg.r2),
        alpha_gain=filter_cfg.alpha_gain, dt=filter_cfg.dt,
        rd1_shrink=filter_cfg.rd1_shrink, feas_tol=filter_cfg.feas_tol,
        max_subproblems=filter_cfg.max_subproblems,
        membership_tol=filter_cfg.membership_tol,
    )
    return solve_filter(model, free_constraints, evading_cfg, zcbf_cfg,
                        base_cfg, x, u_nom, u_nom, field_fn=field_fn,
                        zcbf_eval=zcbf_eval)
