"""Cell simulator: hand-computed oracles, closed-form thermal relaxation, config parsing."""

from __future__ import annotations

import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from safecharge import battery_env as env
from safecharge.battery_env import BatteryConfig, BatteryState, ConfigError

CFG = BatteryConfig()


# ---------------------------------------------------------------------------
# OCV / reset
# ---------------------------------------------------------------------------


def test_ocv_endpoints_and_midpoints():
    table = CFG.ocv_table
    assert env.ocv(0.0, CFG) == table[0][1]
    assert env.ocv(1.0, CFG) == table[-1][1]
    for (s0, v0), (s1, v1) in zip(table, table[1:]):
        assert env.ocv((s0 + s1) / 2, CFG) == pytest.approx((v0 + v1) / 2, abs=1e-12)


@given(st.floats(0.0, 1.0))
def test_inverse_ocv_roundtrip(soc):
    assert env.inverse_ocv(env.ocv(soc, CFG), CFG) == pytest.approx(soc, abs=1e-9)


@given(st.floats(0.0, 1.0), st.floats(0.0, 1.0))
def test_ocv_monotone(a, b):
    lo, hi = min(a, b), max(a, b)
    assert env.ocv(lo, CFG) <= env.ocv(hi, CFG)


def test_reset_cold_start():
    cfg = replace(CFG, initial_voltage_v=2.5, initial_temp_k=273.0)
    s = env.reset(cfg)
    assert (s.temp_k, s.voltage_v, s.step_count, s.time_s) == (273.0, 2.5, 0, 0.0)
    # Between knots (0, 2.2) and (0.1, 3.0): 0.1 * 0.3 / 0.8.
    assert s.soc == pytest.approx(0.0375, abs=1e-12)


def test_reset_low_voltage_start():
    cfg = replace(CFG, initial_voltage_v=2.2, initial_temp_k=293.0)
    s = env.reset(cfg)
    assert (s.temp_k, s.voltage_v, s.soc) == (293.0, 2.2, 0.0)


def test_reset_rejects_voltage_outside_table():
    table = ((0.0, 2.6), (1.0, 4.25))
    with pytest.raises(ConfigError, match="initial_voltage_v"):
        replace(CFG, ocv_table=table, initial_voltage_v=2.5)


# ---------------------------------------------------------------------------
# Heat, reward, violations
# ---------------------------------------------------------------------------


def test_heat_zero_current():
    assert env.heat_generation(0.0, env.reset(CFG), CFG) == 0.0


def test_heat_joule_only():
    cfg = replace(CFG, internal_resistance_ohm=0.05, entropy_coeff_v_per_k=0.0)
    for temp in (250.0, 298.15, 330.0):
        state = BatteryState(soc=0.3, temp_k=temp, voltage_v=3.3)
        assert env.heat_generation(-4.2, state, cfg) == pytest.approx(4.2 * 4.2 * 0.05, rel=1e-12)
    assert 4.2 * 4.2 * 0.05 == pytest.approx(0.882)


def test_heat_entropic_only():
    cfg = replace(CFG, internal_resistance_ohm=0.0, entropy_coeff_v_per_k=-1e-4)
    state = BatteryState(soc=0.3, temp_k=300.0, voltage_v=3.3)
    assert env.heat_generation(-1.0, state, cfg) == pytest.approx(-0.03, rel=1e-12)


def test_reward_with_both_violations():
    t_v, v_v = env.violations(CFG.t_safe_k + 1.0, 4.3, CFG)
    assert t_v == pytest.approx(1.0)
    assert v_v == pytest.approx(0.1)
    assert env.reward_from_violations(t_v, v_v) == pytest.approx(-15.1)


def test_reward_safe_step_is_exactly_step_penalty():
    t_v, v_v = env.violations(300.0, 4.0, CFG)
    assert (t_v, v_v) == (0.0, 0.0)
    assert env.reward_from_violations(t_v, v_v) == -0.1


def test_unsafe_boundary_inclusive():
    assert env.is_unsafe(CFG.t_safe_k, 4.0, CFG)
    assert env.is_unsafe(300.0, CFG.v_safe, CFG)
    assert not env.is_unsafe(303.15, 4.0, CFG)


# ---------------------------------------------------------------------------
# Step dynamics
# ---------------------------------------------------------------------------


def test_equilibrium_at_ambient():
    state = BatteryState(soc=0.4, temp_k=CFG.ambient_temp_k, voltage_v=env.ocv(0.4, CFG))
    nxt, out = env.step(state, 0.0, CFG)
    assert nxt.temp_k == CFG.ambient_temp_k
    assert nxt.soc == state.soc
    assert out.reward == -0.1


def test_step_rejects_out_of_range_current():
    s = env.reset(CFG)
    with pytest.raises(ValueError):
        env.step(s, -4.3, CFG)
    with pytest.raises(ValueError):
        env.step(s, 0.1, CFG)


def test_single_step_matches_hand_computation():
    s = env.reset(CFG)  # soc 0.0375, T 298.15
    nxt, out = env.step(s, -4.2, CFG)
    soc = 0.0375 + 4.2 * 10 / (3600 * 1.5)
    assert nxt.soc == pytest.approx(soc, rel=1e-12)
    ocv = 2.2 + 0.8 * soc / 0.1
    assert nxt.voltage_v == pytest.approx(ocv + 4.2 * 0.05, rel=1e-12)
    q = 4.2**2 * 0.05 - 4.2 * 298.15 * 1e-4
    assert nxt.temp_k == pytest.approx(298.15 + 10 / 45.0 * q, rel=1e-12)
    np.testing.assert_allclose(out.next_observation, [(nxt.temp_k - 273.15) / 50, nxt.voltage_v / 5, nxt.soc])
    assert nxt.time_s == 10.0 and nxt.step_count == 1


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-4.2, 0.0), min_size=1, max_size=60))
def test_soc_monotone_and_bounded_under_charging(currents):
    s = env.reset(CFG)
    for i in currents:
        nxt, out = env.step(s, i, CFG)
        assert s.soc <= nxt.soc <= 1.0
        assert out.reward <= -0.1
        assert out.reward + 0.1 == pytest.approx(-100 * out.v_violation - 5 * out.t_violation)
        s = nxt


def test_zero_current_relaxation_matches_exponential():
    cfg = replace(CFG, entropy_coeff_v_per_k=0.0, initial_temp_k=273.0, dt_s=2.25, max_steps=800)
    assert cfg.dt_s <= cfg.thermal_time_constant_s / 100
    s = env.reset(cfg)
    tau = cfg.thermal_time_constant_s
    prev = s.temp_k
    while s.time_s < 30 * 60:
        s, _ = env.step(s, 0.0, cfg)
        analytic = cfg.ambient_temp_k + (273.0 - cfg.ambient_temp_k) * math.exp(-s.time_s / tau)
        assert abs(s.temp_k - analytic) / analytic <= 0.01
        assert prev <= s.temp_k <= cfg.ambient_temp_k
        prev = s.temp_k


def test_episode_ends_at_target_or_max_steps():
    cfg = replace(CFG, max_steps=5)
    s = env.reset(cfg)
    for k in range(5):
        s, out = env.step(s, 0.0, cfg)
    assert out.done and not out.terminal

    s = env.reset(CFG)
    out = None
    while out is None or not out.done:
        s, out = env.step(s, -4.2, CFG)
    assert out.terminal and s.soc >= CFG.soc_target


def test_env_wrapper_matches_functional_api():
    e = env.BatteryEnv(CFG)
    np.testing.assert_array_equal(e.reset(), env.observe(env.reset(CFG)))
    out = e.step(-2.0)
    _, ref = env.step(env.reset(CFG), -2.0, CFG)
    np.testing.assert_array_equal(out.next_observation, ref.next_observation)
    assert (out.reward, out.done, out.unsafe) == (ref.reward, ref.done, ref.unsafe)


# ---------------------------------------------------------------------------
# Config files
# ---------------------------------------------------------------------------


def test_shipped_configs_load(repo_root):
    for path in sorted((repo_root / "configs").glob("*.toml")):
        cfg = env.load_config(path)
        assert cfg.name == path.stem


def test_config_dump_roundtrip(tmp_path):
    cfg = replace(CFG, capacity_ah=1.8, initial_temp_k=273.0)
    path = tmp_path / "c.toml"
    path.write_text(env.dump_config(cfg))
    assert env.load_config(path) == cfg


def test_unknown_field_names_line(tmp_path, repo_root):
    text = (repo_root / "configs" / "train_a.toml").read_text() + "bogus_field = 1\n"
    path = tmp_path / "bad.toml"
    path.write_text(text)
    with pytest.raises(ConfigError) as info:
        env.load_config(path)
    assert info.value.field_name == "bogus_field"
    assert info.value.line == len(text.splitlines())


def test_bad_value_names_field_and_line(tmp_path, repo_root):
    lines = (repo_root / "configs" / "train_a.toml").read_text().splitlines()
    idx = next(i for i, l in enumerate(lines) if l.startswith("capacity_ah"))
    lines[idx] = "capacity_ah = -1.0"
    path = tmp_path / "bad.toml"
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(ConfigError) as info:
        env.load_config(path)
    assert info.value.field_name == "capacity_ah"
    assert info.value.line == idx + 1
    assert "capacity_ah" in str(info.value)


def test_syntax_error_reports_line(tmp_path):
    path = tmp_path / "bad.toml"
    path.write_text("capacity_ah = 1.5\nmass_kg = = 2\n")
    with pytest.raises(ConfigError) as info:
        env.load_config(path)
    assert info.value.line == 2


def test_wrong_type_rejected():
    data = CFG.to_dict()
    data["max_steps"] = 1.5
    with pytest.raises(ConfigError, match="max_steps"):
        BatteryConfig.from_dict(data)
    data = CFG.to_dict()
    data["mass_kg"] = "heavy"
    with pytest.raises(ConfigError, match="mass_kg"):
        BatteryConfig.from_dict(data)
