"""Harness tests: config schema, determinism, crash-safe logs, metrics,
audits, and the CLI surface."""

from __future__ import annotations

import hashlib
import math
import os

import numpy as np
import pytest

from rolloutcbf.cli import main as cli_main
from rolloutcbf.errors import ConfigError, ContractViolationError, SimAbort
from rolloutcbf.sim import (
    SimLog,
    audit_assumptions,
    bundle_from_config,
    metrics,
    run_sim,
)
from rolloutcbf.simconfig import default_config, load_config, validate_config

CONFIG_PATH = os.path.join(os.path.dirname(__file__), "..", "configs",
                           "uav_default.toml")


def short_uav_config(duration=1.0, mode="proposed", **output):
    cfg = default_config()
    cfg.raw["sim"]["duration"] = duration
    cfg.raw["sim"]["mode"] = mode
    cfg.raw["evading"]["gain_samples"] = 512
    cfg.raw["output"].update(output)
    return cfg


def di_config(duration=2.0, mode="proposed"):
    cfg = default_config()
    cfg.raw["scenario"]["kind"] = "double_integrator"
    cfg.raw["scenario"]["double_integrator"]["initial_state"] = [-2.0, 0.2]
    cfg.raw["scenario"]["double_integrator"]["reference_position"] = 3.0
    cfg.raw["sim"]["duration"] = duration
    cfg.raw["sim"]["mode"] = mode
    cfg.raw["zcbf"]["t_max"] = 5.0
    return cfg


# --- config schema ----------------------------------------------------------


def test_shipped_config_loads():
    cfg = load_config(CONFIG_PATH)
    assert cfg.mode == "proposed"
    assert cfg.duration == 70.0


def test_unknown_keys_are_errors():
    with pytest.raises(ConfigError, match="unknown key 'sim.typo'"):
        validate_config({"sim": {"typo": 1}})
    with pytest.raises(ConfigError, match="scenario.uav.obstacle"):
        validate_config({"scenario": {"uav": {"obstacle": [0, 0, 0]}}})


def test_type_errors_name_the_path():
    with pytest.raises(ConfigError, match="'sim.duration'"):
        validate_config({"sim": {"duration": "long"}})
    with pytest.raises(ConfigError, match="'filter.r1'"):
        validate_config({"filter": {"r1": True}})


def test_value_checks():
    with pytest.raises(ConfigError, match="sim.mode"):
        validate_config({"sim": {"mode": "fancy"}})
    with pytest.raises(ConfigError, match="integer multiple"):
        validate_config({"sim": {"control_dt": 0.05, "plant_dt": 0.03}})
    with pytest.raises(ConfigError, match="control_dt"):
        validate_config({"sim": {"control_dt": 0.01, "plant_dt": 0.05}})


def test_missing_file_is_config_error(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(str(tmp_path / "nope.toml"))
    bad = tmp_path / "bad.toml"
    bad.write_text("sim = [unclosed")
    with pytest.raises(ConfigError, match="not valid TOML"):
        load_config(str(bad))


def test_scenario_invariants_rejected_at_build():
    cfg = default_config()
    cfg.raw["scenario"]["uav"]["gamma_bounds"] = [-math.pi / 2, math.pi / 2]
    with pytest.raises(ContractViolationError):
        bundle_from_config(cfg)
    cfg = default_config()
    cfg.raw["scenario"]["uav"]["v_bounds"] = [0.0, 25.0]
    with pytest.raises(ContractViolationError):
        bundle_from_config(cfg)


# --- run_sim ------------------------------------------------------------------


def test_row_count_and_monotone_time(tmp_path):
    cfg = di_config(duration=2.0)
    log = run_sim(cfg, log_path=str(tmp_path / "di.csv"))
    assert len(log) == int(2.0 / 0.05) + 1
    t = log.column("time")
    assert np.all(np.diff(t) > 0)


def test_byte_identical_determinism(tmp_path):
    cfg = short_uav_config(duration=1.0)
    p1, p2 = str(tmp_path / "a.csv"), str(tmp_path / "b.csv")
    run_sim(cfg, log_path=p1)
    run_sim(cfg, log_path=p2)
    h1 = hashlib.sha256(open(p1, "rb").read()).hexdigest()
    h2 = hashlib.sha256(open(p2, "rb").read()).hexdigest()
    assert h1 == h2


def test_truncated_log_is_valid_prefix(tmp_path):
    cfg = short_uav_config(duration=1.0)
    p = str(tmp_path / "full.csv")
    run_sim(cfg, log_path=p)
    data = open(p, "rb").read()
    cut = tmp_path / "cut.csv"
    cut.write_bytes(data[: int(len(data) * 0.6)])
    log = SimLog.from_csv(str(cut))
    assert 0 < len(log) < int(1.0 / 0.05) + 1
    assert np.all(np.diff(log.column("time")) > 0)
    metrics(log)  # parseable prefix supports the summary


def test_nominal_only_collides():
    """Unfiltered tracking of a reference through the obstacle collides."""
    cfg = short_uav_config(duration=25.0, mode="nominal-only")
    log = run_sim(cfg, log_path="")
    assert np.min(log.column("clearance")) < 0.0
    assert np.all(np.isnan(log.column("H")))


def test_proposed_short_run_stays_safe():
    cfg = short_uav_config(duration=2.0)
    bundle = bundle_from_config(cfg)
    log = run_sim(cfg, bundle=bundle, log_path="")
    assert np.min(log.column("clearance")) > 0.0
    m = metrics(log, bundle)
    assert m["rd1_violation_rows"] == 0
    assert m["input_violation_rows"] == 0


def test_outside_start_engages_best_effort(caplog):
    """Starting outside the invariant set warns and still runs."""
    import logging

    cfg = short_uav_config(duration=0.5)
    x_obs = cfg.raw["scenario"]["uav"]["obstacle_center"]
    # 40 m short of the obstacle, heading straight at it: unavoidable
    cfg.raw["scenario"]["uav"]["initial_state"] = [
        x_obs[0] - 40.0, x_obs[1], 50.0, 20.0, 0.0, 0.0]
    with caplog.at_level(logging.WARNING):
        log = run_sim(cfg, log_path="")
    assert len(log) == 11
    assert any("outside the invariant set" in r.message for r in caplog.records)


def test_plant_domain_exit_aborts_with_partial_log():
    """A nominal that brakes V to zero aborts the run but keeps the log
    prefix."""
    cfg = short_uav_config(duration=10.0, mode="nominal-only")
    bundle = bundle_from_config(cfg)

    class Braker:
        def __call__(self, x, t):
            return np.array([-5.0, 9.81, 0.0])

    bundle.nominal = Braker()
    with pytest.raises(SimAbort) as info:
        run_sim(cfg, bundle=bundle, log_path="")
    partial = info.value.log
    assert partial is not None and len(partial) > 10
    assert np.all(np.diff(partial.column("time")) > 0)


def test_diagnostic_columns_gated():
    cfg = short_uav_config(duration=0.5, rollout_diagnostics=True,
                           include_timing=True)
    log = run_sim(cfg, log_path="")
    for col in ("rollout_len", "early_stopped", "switching",
                "horizon_warning", "solve_time_us"):
        assert log.has(col)
    cfg2 = short_uav_config(duration=0.5)
    log2 = run_sim(cfg2, log_path="")
    assert log2.has("solve_time_us")  # always recorded in memory
    assert not log2.has("rollout_len")


def test_timing_column_excluded_from_csv_by_default(tmp_path):
    cfg = short_uav_config(duration=0.5)
    p = str(tmp_path / "run.csv")
    run_sim(cfg, log_path=p)
    header = open(p).readline()
    assert "solve_time_us" not in header
    cfg = short_uav_config(duration=0.5, include_timing=True)
    run_sim(cfg, log_path=p)
    assert "solve_time_us" in open(p).readline()


# --- metrics ------------------------------------------------------------------


def test_metrics_single_row_log():
    cfg = di_config(duration=2.0)
    bundle = bundle_from_config(cfg)
    log = run_sim(cfg, bundle=bundle, log_path="")
    one = SimLog(columns=log.columns, rows=log.rows[:1])
    m = metrics(one, bundle)
    assert m["rows"] == 1
    assert m["chattering_index"] == 0.0
    assert m["fallback_steps"] == 0
    assert m["min_clearance"] == pytest.approx(
        bundle.scenario.clearance(np.array([-2.0, 0.2])))


def test_metrics_requires_rows():
    with pytest.raises(ContractViolationError):
        metrics(SimLog(columns=["time"], rows=np.empty((0, 1))))


def test_metrics_counts_violations():
    cols = ["time", "r", "v", "u_hat_0", "u_safe_0", "H", "t_star",
            "h_v_0", "clearance", "used_fallback", "active_set"]
    rows = np.array([
        [0.0, 0, 0, 0, 0.5, -1, 0, -1.0, 2.0, 0, 0],
        [0.1, 0, 0, 0, -0.5, -1, 0, 0.5, 1.0, 1, 1],
        [0.2, 0, 0, 0, 0.5, -1, 0, -0.2, -0.3, 0, 0],
    ])
    log = SimLog(columns=cols, rows=rows)
    m = metrics(log)
    assert m["rd1_violation_rows"] == 1
    assert m["rd1_max_violation"] == pytest.approx(0.5)
    assert m["min_clearance"] == pytest.approx(-0.3)
    assert m["fallback_steps"] == 1
    assert m["chattering_index"] == pytest.approx(1.0)  # |0.5 - (-0.5)|
    assert m["input_violation_rows"] is None


# --- audit --------------------------------------------------------------------


def test_audit_default_config_passes():
    cfg = short_uav_config()
    rep = audit_assumptions(cfg, sample_count=20_000)
    assert rep["passed"]
    assert min(rep["min_mu"]) > 0 and min(rep["min_nu"]) > 0


def test_audit_wide_gamma_box_fails():
    """Widening the gamma box until the gravity drift exceeds the input
    authority is caught by the sampled audit."""
    cfg = short_uav_config()
    cfg.raw["scenario"]["uav"]["gamma_bounds"] = [-1.45, 1.45]
    cfg.raw["scenario"]["uav"]["u_gamma_bounds"] = [2.0, 19.62]
    rep = audit_assumptions(cfg, sample_count=20_000)
    assert not rep["passed"]
    assert min(rep["min_mu"]) <= 0  # g0 cos(gamma) drops below u_gamma_min


def test_audit_oversized_epsilon_fails():
    cfg = short_uav_config()
    cfg.raw["evading"]["epsilon"] = 1e9
    rep = audit_assumptions(cfg, sample_count=5_000)
    assert not rep["passed"]
    assert min(rep["min_eps_slack"]) <= 0


def test_audit_rejects_bad_count():
    with pytest.raises(ContractViolationError):
        audit_assumptions(short_uav_config(), sample_count=0)


# --- CLI ----------------------------------------------------------------------


def test_cli_run_and_metrics(tmp_path, capsys):
    out = str(tmp_path / "cli.csv")
    code = cli_main(["run", CONFIG_PATH, "--duration", "0.5", "--out", out])
    assert code == 0
    assert os.path.exists(out)
    text = capsys.readouterr().out
    assert "min_clearance" in text
    code = cli_main(["metrics", out, "--config", CONFIG_PATH])
    assert code == 0


def test_cli_config_error_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text("[sim]\nmode = 'warp'\n")
    assert cli_main(["run", str(bad)]) == 1
    assert "config error" in capsys.readouterr().err


def test_cli_audit_exit_codes(tmp_path, capsys):
    assert cli_main(["audit", CONFIG_PATH, "--samples", "2000"]) == 0
    widened = tmp_path / "wide.toml"
    widened.write_text(
        open(CONFIG_PATH).read()
        .replace("gamma_bounds = [-0.3, 0.3]", "gamma_bounds = [-1.45, 1.45]")
        .replace("u_gamma_bounds = [0.0, 19.62]",
                 "u_gamma_bounds = [2.0, 19.62]"))
    assert cli_main(["audit", str(widened), "--samples", "2000"]) == 2


def test_cli_missing_log_path(capsys):
    assert cli_main(["metrics", "/nonexistent/log.csv"]) == 1


# --- double-integrator scenario path --------------------------------------------


def test_double_integrator_modes_run():
    for mode in ("proposed", "baseline", "nominal-only"):
        cfg = di_config(duration=1.0, mode=mode)
        log = run_sim(cfg, log_path="")
        assert len(log) == 21
    cfg = di_config(duration=3.0, mode="proposed")
    log = run_sim(cfg, log_path="")
    assert np.min(log.column("clearance")) > 0.0  # wall not crossed


def test_double_integrator_with_velocity_box():
    cfg = di_config(duration=3.0)
    cfg.raw["scenario"]["double_integrator"]["v_bounds"] = [-0.5, 0.5]
    bundle = bundle_from_config(cfg)
    log = run_sim(cfg, bundle=bundle, log_path="")
    m = metrics(log, bundle)
    assert m["rd1_violation_rows"] == 0
    assert np.all(np.abs(log.column("v")) <= 0.5 + 1e-9)
