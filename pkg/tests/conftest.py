"""Shared fixtures: small test systems and the wired UAV scenario."""

from __future__ import annotations

import numpy as np
import pytest

from rolloutcbf import (
    ConstraintSet,
    EvadingConfig,
    RD2Constraint,
    SystemModel,
    ZcbfConfig,
)
from rolloutcbf.safety_filter import FilterConfig
from rolloutcbf.sim import double_integrator_model
from rolloutcbf.uav import UavScenario, build_scenario


def make_double_integrator(u_lo=-1.0, u_hi=1.0, wall=1.0, v_box=None):
    """1-D double integrator with a position wall at r = wall.

    ``v_box`` = (lo, hi) adds a box on the velocity channel (c = 1).
    """
    model = double_integrator_model()
    rd2 = RD2Constraint(
        h=lambda r: r[..., 0] - wall,
        grad=lambda r: np.ones_like(r),
        hess=lambda r: np.zeros(r.shape[:-1] + (1, 1)),
    )
    c = 1 if v_box else 0
    constraints = ConstraintSet(
        rd2=rd2, c=c,
        v_min=np.array([v_box[0]] if v_box else []),
        v_max=np.array([v_box[1]] if v_box else []),
        u_min=np.array([u_lo]), u_max=np.array([u_hi]),
    )
    return model, constraints


def braking_evading(k=10.0, eps=1e-4):
    return EvadingConfig(eps=eps, k_free=np.array([k]), k_box=np.empty((0, 3)))


@pytest.fixture(scope="session")
def di():
    """(model, constraints) for the unconstrained-velocity double integrator."""
    return make_double_integrator()


@pytest.fixture(scope="session")
def di_cfgs():
    """(evading, zcbf) configs used by the double-integrator oracles."""
    return braking_evading(), ZcbfConfig(t_max=5.0, dt=0.01, dwell=1.0)


@pytest.fixture(scope="session")
def uav_bundle():
    """Default UAV scenario, wired once per session (includes jit warmup)."""
    return build_scenario(UavScenario())


@pytest.fixture(scope="session")
def uav_rng_states(uav_bundle):
    """10^4 states sampled over the scenario box (seeded)."""
    rng = np.random.default_rng(7)
    return uav_bundle.scenario.sample_states(10_000, rng)


def constant_model(f_v_val, g_val):
    """1-D system with constant drift and input map on the velocity block."""
    return SystemModel(
        n=1, m=1,
        f_r=lambda x: x[..., 1:2].copy(),
        f_v=lambda x: np.full(x.shape[:-1] + (1,), float(f_v_val)),
        g_diag=lambda x: np.full(x.shape[:-1] + (1,), float(g_val)),
    )


def default_filter_cfg(m=1, **kw):
    return FilterConfig.identity(m=m, **kw)
