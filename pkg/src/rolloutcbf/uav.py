"""Fixed-wing UAV scenario: point-mass guidance dynamics, a spherical
obstacle, speed and flight-path-angle boxes, and a circular reference.

State (Px, Py, Pz, V, gamma, psi): inertial position, airspeed, flight
path angle, heading. Inputs (u_V, u_gamma, u_psi): longitudinal
acceleration, normal acceleration, lateral acceleration. The velocity
block in the canonical channel order is (V, gamma, psi) with the first two
box-constrained and the heading free.

The gravity constant is written g0 throughout; plain g is the input map.

Besides the generic model wiring, this module provides a fused, jitted
closed-loop field for the retreat maneuver. It is an optional fast path:
the generic composed field remains the source of truth and the fused one
is asserted against it in the test suite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field
from typing import Callable, Optional

import numpy as np

from .errors import ContractViolationError, DomainError
from .evading import EvadingConfig
from .model import ConstraintSet, RD2Constraint, SystemModel, eval_dynamics
from .safety_filter import FilterConfig
from .zcbf import ZcbfConfig

try:
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _HAVE_NUMBA = False

GAMMA_DOMAIN_MARGIN = 0.1  # rad; keeps cos(gamma) bounded away from 0 on the box


@dataclass(frozen=True)
class UavScenario:
    """Scenario parameters with documented reconstruction defaults.

    The reference circle intersects the inflated obstacle (its center lies
    on the path), so an unfiltered tracker collides. Bounds keep the model
    away from V = 0 and |gamma| = pi/2 where the input map degenerates.
    """

    gravity: float = 9.81
    obstacle_center: tuple = (100.0, 0.0, 50.0)
    uav_radius: float = 1.0
    obstacle_radius: float = 20.0
    clearance_radius: float = 2.0
    v_bounds: tuple = (15.0, 25.0)
    gamma_bounds: tuple = (-0.3, 0.3)
    u_v_bounds: tuple = (-5.0, 5.0)
    u_gamma_bounds: tuple = (0.0, 19.62)
    u_psi_bounds: tuple = (-5.0, 5.0)
    reference_center: tuple = (0.0, 0.0)
    reference_radius: float = 100.0
    reference_altitude: float = 50.0
    reference_rate: float = 0.2           # rad/s; sign sets turn direction
    initial_state: tuple = (-100.0, 0.0, 50.0, 20.0, 0.0, -math.pi / 2)
    position_margin: float = 60.0         # sampling box slack around the circle
    seed: int = 0

    def __post_init__(self):
        if self.v_bounds[0] <= 0.0:
            raise ContractViolationError("v_bounds must have V_min > 0")
        if self.v_bounds[0] >= self.v_bounds[1]:
            raise ContractViolationError("v_bounds must be increasing")
        g_lo, g_hi = self.gamma_bounds
        if g_lo >= g_hi:
            raise ContractViolationError("gamma_bounds must be increasing")
        if max(abs(g_lo), abs(g_hi)) >= math.pi / 2 - GAMMA_DOMAIN_MARGIN:
            raise ContractViolationError(
                f"|gamma| bound must stay below pi/2 - {GAMMA_DOMAIN_MARGIN}"
            )
        for name in ("u_v_bounds", "u_gamma_bounds", "u_psi_bounds"):
            lo, hi = getattr(self, name)
            if lo >= hi:
                raise ContractViolationError(f"{name} must be increasing")
        if min(self.uav_radius, self.obstacle_radius, self.clearance_radius) < 0:
            raise ContractViolationError("radii must be nonnegative")
        if self.reference_radius <= 0.0 or self.reference_rate == 0.0:
            raise ContractViolationError("reference circle must be nondegenerate")

    @property
    def inflated_radius(self) -> float:
        return self.uav_radius + self.obstacle_radius + self.clearance_radius

    def reference_point(self, t):
        """Reference position at time t (broadcasts over t)."""
        t = np.asarray(t, dtype=float)
        ang = self.reference_rate * t
        cx, cy = self.reference_center
        return np.stack(
            [cx + self.reference_radius * np.cos(ang),
             cy + self.reference_radius * np.sin(ang),
             np.broadcast_to(self.reference_altitude, ang.shape).copy()],
            axis=-1,
        )

    def sample_box(self):
        """Axis-aligned state box for audits and gain estimation."""
        cx, cy = self.reference_center
        rr = self.reference_radius + self.position_margin
        lo = np.array([cx - rr, cy - rr, self.reference_altitude - 30.0,
                       self.v_bounds[0], self.gamma_bounds[0], -math.pi])
        hi = np.array([cx + rr, cy + rr, self.reference_altitude + 30.0,
                       self.v_bounds[1], self.gamma_bounds[1], math.pi])
        return lo, hi

    def sample_states(self, count: int, rng: np.random.Generator) -> np.ndarray:
        lo, hi = self.sample_box()
        return rng.uniform(lo, hi, size=(count, 6))

    def clearance(self, x: np.ndarray) -> np.ndarray:
        """Signed obstacle clearance: ||P - P_obs|| minus the inflated radius."""
        p = np.asarray(x, dtype=float)[..., :3] - np.asarray(self.obstacle_center)
        return np.sqrt(np.sum(p * p, axis=-1)) - self.inflated_radius


def _check_domain(x):
    v = x[..., 3]
    gam = x[..., 4]
    if np.any(v <= 0.0) or np.any(np.abs(gam) >= math.pi / 2):
        raise DomainError(
            "state outside modeled region (need V > 0 and |gamma| < pi/2)"
        )


def uav_model(scenario: UavScenario) -> SystemModel:
    """Guidance dynamics as a second-order control-affine system.

    n = m = 3; f_r is the velocity vector in inertial axes, the only
    drift on the velocity block is the gravity pull on gamma, and the
    input map is diag(1, 1/V, 1/(V cos gamma)).
    """
    g0 = scenario.gravity

    def f_r(x):
        x = np.asarray(x, dtype=float)
        _check_domain(x)
        v, gam, psi = x[..., 3], x[..., 4], x[..., 5]
        cg = np.cos(gam)
        return np.stack([v * cg * np.cos(psi), v * cg * np.sin(psi),
                         v * np.sin(gam)], axis=-1)

    def f_v(x):
        x = np.asarray(x, dtype=float)
        _check_domain(x)
        v, gam = x[..., 3], x[..., 4]
        z = np.zeros_like(v)
        return np.stack([z, -g0 * np.cos(gam) / v, z], axis=-1)

    def g_diag(x):
        x = np.asarray(x, dtype=float)
        _check_domain(x)
        v, gam = x[..., 3], x[..., 4]
        return np.stack([np.ones_like(v), 1.0 / v, 1.0 / (v * np.cos(gam))],
                        axis=-1)

    def jac_f_r(x):
        x = np.asarray(x, dtype=float)
        v, gam, psi = x[..., 3], x[..., 4], x[..., 5]
        cg, sg = np.cos(gam), np.sin(gam)
        cp, sp = np.cos(psi), np.sin(psi)
        out = np.zeros(x.shape[:-1] + (3, 6))
        out[..., 0, 3] = cg * cp
        out[..., 0, 4] = -v * sg * cp
        out[..., 0, 5] = -v * cg * sp
        out[..., 1, 3] = cg * sp
        out[..., 1, 4] = -v * sg * sp
        out[..., 1, 5] = v * cg * cp
        out[..., 2, 3] = sg
        out[..., 2, 4] = v * cg
        return out

    def jac_f_v(x):
        x = np.asarray(x, dtype=float)
        v, gam = x[..., 3], x[..., 4]
        out = np.zeros(x.shape[:-1] + (3, 6))
        out[..., 1, 3] = g0 * np.cos(gam) / (v * v)
        out[..., 1, 4] = g0 * np.sin(gam) / v
        return out

    def jac_g_diag(x):
        x = np.asarray(x, dtype=float)
        v, gam = x[..., 3], x[..., 4]
        cg, sg = np.cos(gam), np.sin(gam)
        out = np.zeros(x.shape[:-1] + (3, 6))
        out[..., 1, 3] = -1.0 / (v * v)
        out[..., 2, 3] = -1.0 / (v * v * cg)
        out[..., 2, 4] = sg / (v * cg * cg)
        return out

    return SystemModel(n=3, m=3, f_r=f_r, f_v=f_v, g_diag=g_diag,
                       jac_f_r=jac_f_r, jac_f_v=jac_f_v, jac_g_diag=jac_g_diag)


def obstacle_constraint(scenario: UavScenario) -> RD2Constraint:
    """Spherical keep-out: h(P) = R_inflated^2 - ||P - P_obs||^2 <= 0."""
    center = np.asarray(scenario.obstacle_center, dtype=float)
    rad2 = scenario.inflated_radius**2

    def h(p):
        d = np.asarray(p, dtype=float) - center
        return rad2 - np.sum(d * d, axis=-1)

    def grad(p):
        return -2.0 * (np.asarray(p, dtype=float) - center)

    def hess(p):
        p = np.asarray(p, dtype=float)
        eye = -2.0 * np.eye(3)
        return np.broadcast_to(eye, p.shape[:-1] + (3, 3)).copy()

    return RD2Constraint(h=h, grad=grad, hess=hess)


def build_constraints(scenario: UavScenario) -> ConstraintSet:
    return ConstraintSet(
        rd2=obstacle_constraint(scenario),
        c=2,
        v_min=np.array([scenario.v_bounds[0], scenario.gamma_bounds[0]]),
        v_max=np.array([scenario.v_bounds[1], scenario.gamma_bounds[1]]),
        u_min=np.array([scenario.u_v_bounds[0], scenario.u_gamma_bounds[0],
                        scenario.u_psi_bounds[0]]),
        u_max=np.array([scenario.u_v_bounds[1], scenario.u_gamma_bounds[1],
                        scenario.u_psi_bounds[1]]),
    )


class CircleTracker:
    """Single-shooting tracker of the circular reference.

    Optimizes a constant input over a short horizon with projected
    normalized gradient descent around an equilibrium feedforward
    (gravity-compensating normal acceleration plus the centripetal lateral
    term), warm-started from the previous solution and clipped to the
    input box, so the output is admissible by construction. States
    broadcast over leading axes, which the sampling tests rely on.
    """

    def __init__(self, scenario: UavScenario, constraints: ConstraintSet,
                 model: SystemModel, horizon: float = 0.5, n_steps: int = 10,
                 iterations: int = 20, w_input: float = 1e-3,
                 step0: float = 2.0):
        self.scenario = scenario
        self.constraints = constraints
        self.model = model
        self.horizon = horizon
        self.n_steps = n_steps
        self.iterations = iterations
        self.w_input = w_input
        self.step0 = step0
        self._warm: Optional[np.ndarray] = None

    def feedforward(self, x):
        x = np.asarray(x, dtype=float)
        v, gam = x[..., 3], x[..., 4]
        g0 = self.scenario.gravity
        u_gam = g0 * np.cos(gam)
        u_psi = (np.sign(self.scenario.reference_rate) * v * v * np.cos(gam)
                 / self.scenario.reference_radius)
        return np.stack([np.zeros_like(v), u_gam, u_psi], axis=-1)

    def _cost(self, x, u, refs, u_ff):
        """Tracking cost of holding input u over the horizon (Euler model).

        ``refs`` are the precomputed reference points along the horizon.
        Broadcasts over leading axes of x/u.
        """
        dt = self.horizon / self.n_steps
        y = np.asarray(x, dtype=float)
        cost = np.zeros(y.shape[:-1])
        for k in range(1, self.n_steps + 1):
            y = y + dt * eval_dynamics(self.model, y, u)
            err = y[..., :3] - refs[k - 1]
            cost = cost + np.sum(err * err, axis=-1)
        du = u - u_ff
        return cost / self.n_steps + self.w_input * np.sum(du * du, axis=-1)

    def __call__(self, x, t: float) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        xb = np.atleast_2d(x)
        B = xb.shape[0]
        dt = self.horizon / self.n_steps
        refs = self.scenario.reference_point(t + dt * np.arange(1, self.n_steps + 1))
        u_ff = self.feedforward(xb)
        u = u_ff.copy()
        if single and self._warm is not None:
            u[0] = self._warm
        u = np.clip(u, self.constraints.u_min, self.constraints.u_max)
        # FD gradient via one batched cost call: rows = 3 +dims, 3 -dims, per state
        x_tile = np.broadcast_to(xb, (6,) + xb.shape)
        ff_tile = np.broadcast_to(u_ff, (6,) + u_ff.shape)
        refs_tile = refs[:, None, :]
        step = self.step0
        fd = 1e-4
        eye = np.eye(3)
        for _ in range(self.iterations):
            pert = np.concatenate([u + fd * eye[:, None, :],
                                   u - fd * eye[:, None, :]], axis=0)
            costs = self._cost(x_tile, pert, refs_tile, ff_tile)
            grad = ((costs[:3] - costs[3:]) / (2 * fd)).T
            norm = np.sqrt(np.sum(grad * grad, axis=-1, keepdims=True))
            u = u - step * grad / np.maximum(norm, 1e-12)
            u = np.clip(u, self.constraints.u_min, self.constraints.u_max)
            step *= 0.8
        if single:
            self._warm = u[0].copy()
            return u[0]
        return u


def nominal_controller(scenario: UavScenario,
                       constraints: Optional[ConstraintSet] = None,
                       model: Optional[SystemModel] = None,
                       **kwargs) -> CircleTracker:
    """Default nominal controller; any (x, t) -> U callable can replace it."""
    constraints = constraints or build_constraints(scenario)
    model = model or uav_model(scenario)
    return CircleTracker(scenario, constraints, model, **kwargs)


# --- fused closed-loop field (numba fast path) -----------------------------

if _HAVE_NUMBA:

    @njit(cache=True)
    def _uav_retreat_field(Y, out, p_obs, g0, u_min, u_max, eps,
                           k_free, k1, k2, k3, v_center, v_half):
        B = Y.shape[0]
        for i in range(B):
            V = Y[i, 3]
            gam = Y[i, 4]
            if V <= 0.0 or abs(gam) >= 1.5707963267948966:
                for j in range(6):
                    out[i, j] = np.nan
                continue
            px = Y[i, 0] - p_obs[0]
            py = Y[i, 1] - p_obs[1]
            pz = Y[i, 2] - p_obs[2]
            psi = Y[i, 5]
            cg = math.cos(gam)
            sg = math.sin(gam)
            cp = math.cos(psi)
            sp = math.sin(psi)
            g1 = 1.0 / V
            g2 = 1.0 / (V * cg)
            gh0 = -2.0 * px
            gh1 = -2.0 * py
            gh2 = -2.0 * pz
            d0 = gh0 * cg * cp + gh1 * cg * sp + gh2 * sg
            d1 = (-gh0 * V * sg * cp - gh1 * V * sg * sp + gh2 * V * cg) * g1
            d2 = (-gh0 * V * cg * sp + gh1 * V * cg * cp) * g2
            drift1 = -g0 * cg  # f_v_1 / g_1 = (-g0 cg / V) * V
            mu0 = -u_min[0]
            nu0 = u_max[0]
            mu1 = -u_min[1] - drift1
            nu1 = u_max[1] + drift1
            mu2 = -u_min[2]
            nu2 = u_max[2]
            c0 = 0.5 * (mu0 + nu0 - math.sqrt((mu0 - nu0) ** 2 + eps))
            c1 = 0.5 * (mu1 + nu1 - math.sqrt((mu1 - nu1) ** 2 + eps))
            c2 = 0.5 * (mu2 + nu2 - math.sqrt((mu2 - nu2) ** 2 + eps))
            tgt0 = v_half[0] * math.tanh(-k3[0] * d0) + v_center[0]
            tgt1 = v_half[1] * math.tanh(-k3[1] * g1 * d1) + v_center[1]
            ut0 = c0 * math.tanh(-k1[0]) * math.tanh(k2[0] * (V - tgt0))
            ut1 = c1 * math.tanh(-k1[1] * g1) * math.tanh(k2[1] * (gam - tgt1))
            ut2 = c2 * math.tanh(-k_free * d2)
            out[i, 0] = V * cg * cp
            out[i, 1] = V * cg * sp
            out[i, 2] = V * sg
            out[i, 3] = ut0
            out[i, 4] = g1 * ut1
            out[i, 5] = g2 * ut2
        return out


def fused_retreat_field(scenario: UavScenario, constraints: ConstraintSet,
                        evading_cfg: EvadingConfig) -> Optional[Callable]:
    """Jitted retreat closed-loop field for this scenario, or None when the
    jit backend is unavailable. Mathematically identical to the generic
    composed field (asserted in tests); skips domain checks for speed."""
    if not _HAVE_NUMBA:
        return None
    p_obs = np.asarray(scenario.obstacle_center, dtype=float)
    args = (
        p_obs,
        float(scenario.gravity),
        constraints.u_min.astype(float),
        constraints.u_max.astype(float),
        float(evading_cfg.eps),
        float(evading_cfg.k_free[0]),
        evading_cfg.k_box[:, 0].copy(),
        evading_cfg.k_box[:, 1].copy(),
        evading_cfg.k_box[:, 2].copy(),
        constraints.v_center.copy(),
        constraints.v_half.copy(),
    )

    def field(y: np.ndarray) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        single = y.ndim == 1
        yb = np.atleast_2d(y)
        out = np.empty_like(yb)
        _uav_retreat_field(yb, out, *args)
        if single:
            return out[0]
        return out

    return field


@dataclass
class ScenarioBundle:
    """Everything the simulator needs for one scenario, wired once."""

    scenario: object
    model: SystemModel
    constraints: ConstraintSet
    evading_cfg: EvadingConfig
    baseline_evading_cfg: EvadingConfig
    zcbf_cfg: ZcbfConfig
    filter_cfg: FilterConfig
    nominal: Callable
    field_fn: Optional[Callable] = None
    baseline_field_fn: Optional[Callable] = None
    extras: dict = dc_field(default_factory=dict)

    def clearance(self, x):
        return self.scenario.clearance(x)


def build_scenario(scenario: UavScenario,
                   zcbf_cfg: Optional[ZcbfConfig] = None,
                   filter_cfg: Optional[FilterConfig] = None,
                   evading_cfg: Optional[EvadingConfig] = None,
                   baseline_evading_cfg: Optional[EvadingConfig] = None,
                   eps: Optional[float] = None,
                   gain_samples: int = 4096,
                   use_fused_field: bool = True) -> ScenarioBundle:
    """Wire the full scenario: model, constraints, derived maneuver gains
    (from seeded sampling over the scenario box), rollout and filter
    configuration, nominal tracker, and the fused fast-path fields."""
    model = uav_model(scenario)
    constraints = build_constraints(scenario)
    rng = np.random.default_rng(scenario.seed)
    samples = scenario.sample_states(gain_samples, rng)
    if evading_cfg is None:
        evading_cfg = EvadingConfig.from_samples(model, constraints, samples,
                                                 eps=eps)
    if baseline_evading_cfg is None:
        baseline_evading_cfg = EvadingConfig.from_samples(
            model, constraints.without_rd1(), samples, eps=evading_cfg.eps)
    zcbf_cfg = zcbf_cfg or ZcbfConfig(t_max=15.0, dt=0.01, dwell=1.0)
    filter_cfg = filter_cfg or FilterConfig.identity(m=3, r1=1.0, r2=0.1,
                                                     alpha_gain=1.0, dt=0.05)
    field_fn = None
    baseline_field_fn = None
    if use_fused_field:
        field_fn = fused_retreat_field(scenario, constraints, evading_cfg)
        if baseline_evading_cfg.k_free.shape[0] == 3:
            baseline_field_fn = _fused_baseline_field(
                scenario, constraints, baseline_evading_cfg)
    return ScenarioBundle(
        scenario=scenario, model=model, constraints=constraints,
        evading_cfg=evading_cfg, baseline_evading_cfg=baseline_evading_cfg,
        zcbf_cfg=zcbf_cfg, filter_cfg=filter_cfg,
        nominal=nominal_controller(scenario, constraints, model),
        field_fn=field_fn, baseline_field_fn=baseline_field_fn,
    )


if _HAVE_NUMBA:

    @njit(cache=True)
    def _uav_baseline_field(Y, out, p_obs, g0, u_min, u_max, eps, k):
        B = Y.shape[0]
        for i in range(B):
            V = Y[i, 3]
            gam = Y[i, 4]
            if V <= 0.0 or abs(gam) >= 1.5707963267948966:
                for j in range(6):
                    out[i, j] = np.nan
                continue
            px = Y[i, 0] - p_obs[0]
            py = Y[i, 1] - p_obs[1]
            pz = Y[i, 2] - p_obs[2]
            psi = Y[i, 5]
            cg = math.cos(gam)
            sg = math.sin(gam)
            cp = math.cos(psi)
            sp = math.sin(psi)
            g1 = 1.0 / V
            g2 = 1.0 / (V * cg)
            gh0 = -2.0 * px
            gh1 = -2.0 * py
            gh2 = -2.0 * pz
            d0 = gh0 * cg * cp + gh1 * cg * sp + gh2 * sg
            d1 = (-gh0 * V * sg * cp - gh1 * V * sg * sp + gh2 * V * cg) * g1
            d2 = (-gh0 * V * cg * sp + gh1 * V * cg * cp) * g2
            drift1 = -g0 * cg
            mu0 = -u_min[0]
            nu0 = u_max[0]
            mu1 = -u_min[1] - drift1
            nu1 = u_max[1] + drift1
            mu2 = -u_min[2]
            nu2 = u_max[2]
            c0 = 0.5 * (mu0 + nu0 - math.sqrt((mu0 - nu0) ** 2 + eps))
            c1 = 0.5 * (mu1 + nu1 - math.sqrt((mu1 - nu1) ** 2 + eps))
            c2 = 0.5 * (mu2 + nu2 - math.sqrt((mu2 - nu2) ** 2 + eps))
            out[i, 0] = V * cg * cp
            out[i, 1] = V * cg * sp
            out[i, 2] = V * sg
            out[i, 3] = c0 * math.tanh(-k[0] * d0)
            out[i, 4] = g1 * c1 * math.tanh(-k[1] * d1)
            out[i, 5] = g2 * c2 * math.tanh(-k[2] * d2)
        return out


def _fused_baseline_field(scenario, constraints, evading_cfg):
    if not _HAVE_NUMBA:
        return None
    p_obs = np.asarray(scenario.obstacle_center, dtype=float)
    args = (p_obs, float(scenario.gravity), constraints.u_min.astype(float),
            constraints.u_max.astype(float), float(evading_cfg.eps),
            evading_cfg.k_free.astype(float))

    def field(y: np.ndarray) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        single = y.ndim == 1
        yb = np.atleast_2d(y)
        out = np.empty_like(yb)
        _uav_baseline_field(yb, out, *args)
        if single:
            return out[0]
        return out

    return field
