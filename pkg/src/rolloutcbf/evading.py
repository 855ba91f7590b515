"""Continuously differentiable retreat maneuver and its closed-loop field.

The maneuver plays two roles: it is the feedback whose closed-loop flow
defines the rollout barrier function, and it is the always-feasible
fallback input of the safety filter. Per channel it is built in the
modified-input domain:

  * unconstrained velocity channels steer with cap * tanh(-k * d), a smooth
    stand-in for the bang-bang law that pointwise minimizes the second
    constraint derivative;
  * box-constrained channels use a nested tanh expression whose inner term
    shifts the velocity target inside the box according to the sign of
    g_v * d, so the same law both retreats from the position constraint and
    traps the velocity inside its box.

Both forms are strictly inside the smooth input cap, which keeps the
original-input maneuver strictly inside the input box everywhere the
authority assumptions hold.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import ContractViolationError, TieError
from .model import (
    ConstraintSet,
    SystemModel,
    _check_state,
    d_coeffs,
    smooth_input_cap,
)


@dataclass(frozen=True)
class EvadingConfig:
    """Maneuver gains and the input-cap smoothing scalar.

    k_free holds one gain per unconstrained velocity channel (channels
    c..m-1, in that order); k_box holds a (c, 3) array of gain triples
    (k1, k2, k3) for the box-constrained channels. All gains and eps must
    be strictly positive.
    """

    eps: float
    k_free: np.ndarray
    k_box: np.ndarray

    def __post_init__(self):
        k_free = np.atleast_1d(np.asarray(self.k_free, dtype=float))
        k_box = np.asarray(self.k_box, dtype=float).reshape(-1, 3)
        if self.eps <= 0.0:
            raise ContractViolationError(f"eps must be > 0, got {self.eps}")
        if np.any(k_free <= 0.0) or np.any(k_box <= 0.0):
            raise ContractViolationError("all maneuver gains must be > 0")
        object.__setattr__(self, "k_free", k_free)
        object.__setattr__(self, "k_box", k_box)

    @property
    def c(self) -> int:
        return self.k_box.shape[0]

    @classmethod
    def from_samples(cls, model: SystemModel, constraints: ConstraintSet,
                     samples: np.ndarray, eps: Optional[float] = None,
                     eps_fraction: float = 1e-4) -> "EvadingConfig":
        """Derive default gains and eps from states sampled over the
        operating region.

        Gains normalize each tanh argument to order one: the d-gains use
        1/median|d_i|, the sign-selector gain uses 1/median|g_v_i|, and the
        target-shift gain k3 uses 1/median|g_v_i * d_i|. The box steepness
        gain is 4/(v_max - v_min). Unless given, eps is eps_fraction times
        the sampled minimum of 4*mu*nu, which makes the cap-positivity
        condition hold on the sampled region by construction.
        """
        from .model import assumption_margins  # local import avoids cycle noise

        samples = np.atleast_2d(np.asarray(samples, dtype=float))
        d = np.abs(d_coeffs(model, constraints, samples))
        g = np.abs(np.asarray(model.g_diag(samples), dtype=float))
        c, m = constraints.c, constraints.m

        def typical(a):
            med = np.median(a, axis=0)
            return np.where(med > 1e-12, med, 1.0)

        d_typ = typical(d)
        g_typ = typical(g)
        gd_typ = typical(g * d)
        k_free = 1.0 / d_typ[c:]
        k_box = np.stack(
            [1.0 / g_typ[:c], 4.0 / (constraints.v_max - constraints.v_min),
             1.0 / gd_typ[:c]],
            axis=-1,
        ).reshape(c, 3)
        if eps is None:
            _, _, _, slack = assumption_margins(model, constraints, samples, 0.0)
            floor = float(np.min(slack))
            if floor <= 0.0:
                raise ContractViolationError(
                    "cannot derive eps: 4*mu*nu is not positive over the sample"
                )
            eps = eps_fraction * floor
        return cls(eps=float(eps), k_free=k_free, k_box=k_box)


def modified_evading_input(model: SystemModel, constraints: ConstraintSet,
                           cfg: EvadingConfig, x: np.ndarray) -> np.ndarray:
    """Maneuver in the modified-input domain, all m channels, batched."""
    x = _check_state(model, x)
    c, m = constraints.c, constraints.m
    if cfg.c != c or cfg.k_free.shape[0] != m - c:
        raise ContractViolationError(
            f"gain layout ({cfg.c} box, {cfg.k_free.shape[0]} free) does not "
            f"match constraint set (c = {c}, m = {m})"
        )
    cap = smooth_input_cap(model, constraints, x, cfg.eps)
    d = d_coeffs(model, constraints, x)
    out = np.empty_like(cap)
    if c < m:
        out[..., c:] = cap[..., c:] * np.tanh(-cfg.k_free * d[..., c:])
    if c > 0:
        g = np.asarray(model.g_diag(x), dtype=float)[..., :c]
        v = x[..., model.n: model.n + c]
        k1 = cfg.k_box[:, 0]
        k2 = cfg.k_box[:, 1]
        k3 = cfg.k_box[:, 2]
        target = constraints.v_half * np.tanh(-k3 * g * d[..., :c]) + constraints.v_center
        out[..., :c] = (cap[..., :c] * np.tanh(-k1 * g)
                        * np.tanh(k2 * (v - target)))
    return out


def evade_unconstrained(model: SystemModel, constraints: ConstraintSet,
                        cfg: EvadingConfig, x: np.ndarray, i: int) -> float:
    """Modified-domain maneuver on unconstrained channel i (c <= i < m)."""
    if not constraints.c <= i < constraints.m:
        raise ContractViolationError(
            f"channel {i} is not an unconstrained channel "
            f"(expected {constraints.c} <= i < {constraints.m})"
        )
    return float(modified_evading_input(model, constraints, cfg, x)[..., i])


def evade_constrained(model: SystemModel, constraints: ConstraintSet,
                      cfg: EvadingConfig, x: np.ndarray, i: int) -> float:
    """Modified-domain maneuver on box-constrained channel i (i < c)."""
    if not 0 <= i < constraints.c:
        raise ContractViolationError(
            f"channel {i} is not box-constrained (c = {constraints.c})"
        )
    return float(modified_evading_input(model, constraints, cfg, x)[..., i])


def evading_input(model: SystemModel, constraints: ConstraintSet,
                  cfg: EvadingConfig, x: np.ndarray) -> np.ndarray:
    """Retreat maneuver in the original input domain, strictly inside the
    input box: u*_i = u_tilde*_i - f_v_i/g_v_i."""
    x = _check_state(model, x)
    ut = modified_evading_input(model, constraints, cfg, x)
    g = np.asarray(model.g_diag(x), dtype=float)
    fv = np.asarray(model.f_v(x), dtype=float)
    return ut - fv / g


def boundary_decay(model: SystemModel, constraints: ConstraintSet,
                   cfg: EvadingConfig, x: np.ndarray, i: int):
    """Derivative of box constraint i under the maneuver:
    2 (v_i - center_i) g_v_i u_tilde*_i. Nonpositive whenever v_i sits on
    either box face."""
    if not 0 <= i < constraints.c:
        raise ContractViolationError(
            f"channel {i} is not box-constrained (c = {constraints.c})"
        )
    x = _check_state(model, x)
    ut = modified_evading_input(model, constraints, cfg, x)
    g = np.asarray(model.g_diag(x), dtype=float)
    v_i = x[..., model.n + i]
    return 2.0 * (v_i - constraints.v_center[i]) * g[..., i] * ut[..., i]


def greedy_input_oracle(model: SystemModel, constraints: ConstraintSet,
                        x: np.ndarray) -> np.ndarray:
    """Bang-bang reference law: u_i = u_min_i if d_i > 0 else u_max_i.

    Test oracle only; the smooth maneuver is compared against it as gains
    grow. Undefined when any d_i = 0 (raises TieError), which is exactly
    why the production maneuver is the smooth one.
    """
    x = _check_state(model, x)
    if x.ndim != 1:
        raise ContractViolationError("oracle accepts a single state")
    d = d_coeffs(model, constraints, x)
    ties = d == 0.0
    if np.any(ties):
        raise TieError(int(np.argmax(ties)))
    return np.where(d > 0.0, constraints.u_min, constraints.u_max)


def closed_loop_field(model: SystemModel, constraints: ConstraintSet,
                      cfg: EvadingConfig) -> Callable[[np.ndarray], np.ndarray]:
    """Vector field of the retreat closed loop, y' = f(y) + g(y) u*(y).

    The velocity block is assembled as g * u_tilde* (exact drift
    cancellation), so no rounding is introduced by subtracting the drift
    and adding it back. The returned callable broadcasts over leading axes.
    """

    def field(y: np.ndarray) -> np.ndarray:
        y = _check_state(model, y)
        ut = modified_evading_input(model, constraints, cfg, y)
        g = np.asarray(model.g_diag(y), dtype=float)
        fr = np.asarray(model.f_r(y), dtype=float)
        return np.concatenate([fr, g * ut], axis=-1)

    return field
