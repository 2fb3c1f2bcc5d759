from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings as hsettings, strategies as st

from greensim.catalog import ConfigError
from greensim.power import (FanCurve, GovernorParams, OperatingPoint, PowerModelParams, fan_power,
                            gpu_power, is_feasible, min_stable_voltage, server_power,
                            simulate_governor, steady_state_temperature, step_thermal,
                            temperature_fan_curve, thermal_resistance)
from greensim.workload import LoadProfile, run_hpl

P = PowerModelParams()
G = GovernorParams()
BINS = [1.1425, 1.155, 1.1675, 1.18, 1.19, 1.2]
DGEMM = LoadProfile.constant(60.0)


def op(f, offset=0.0, duty=0.4):
    return OperatingPoint(f, offset, FanCurve.constant(duty))


def longest_run_above(power, limit):
    best = cur = 0
    for over in power > limit:
        cur = cur + 1 if over else 0
        best = max(best, cur)
    return best


# -- analytic pieces --------------------------------------------------------

def test_alpha_calibration_oracle(settings):
    oracle = (275.0 - 20.0 - 0.5 * (85.0 - 60.0)) / (900.0 * 1.2 ** 2)
    assert settings.sim.power.alpha_dyn == pytest.approx(oracle, rel=1e-15)
    assert P.alpha_dyn == pytest.approx(oracle, rel=1e-15)


def test_tdp_reached_by_top_bin_at_limit():
    assert gpu_power(P, 1.2, 900, 85.0) == pytest.approx(275.0, rel=1e-12)


def test_lowest_bin_below_tdp_at_limit():
    assert gpu_power(P, 1.1425, 900, 85.0) < 275.0


def test_zero_clock_gives_idle():
    assert gpu_power(P, 1.2, 0, P.t_ref_c) == P.p_idle_gpu_w


def test_power_clamped_at_idle():
    assert gpu_power(P, 1.2, 0, -40.0) == P.p_idle_gpu_w


def test_power_domain_rejected():
    with pytest.raises(ValueError):
        gpu_power(P, -1.0, 900, 60)
    with pytest.raises(ValueError):
        gpu_power(P, 1.2, 900, 60, load=1.5)


def test_fan_power_ends():
    assert fan_power(P, 0) == 0
    assert fan_power(P, 1) == P.fan_pmax_w
    with pytest.raises(ValueError):
        fan_power(P, 1.1)


def test_fan_slope_steeper_above_40pct():
    h = 1e-4
    slope = lambda d: (fan_power(P, d + h) - fan_power(P, d - h)) / (2 * h)  # noqa: E731
    assert slope(0.6) > slope(0.3)
    # central difference of a cubic: 3 * pmax * d^2 + pmax * h^2
    assert slope(0.6) == pytest.approx(3 * 240 * 0.36, rel=1e-6)


def test_thermal_fixed_point_at_zero_power():
    t = 80.0
    for _ in range(5000):
        t = step_thermal(P, t, 0.0, 0.4, 0.1)
    assert t == pytest.approx(P.t_ambient_c, abs=1e-6)


def test_step_thermal_rejects_bad_dt():
    with pytest.raises(ValueError):
        step_thermal(P, 50, 100, 0.4, 0)


def test_thermal_resistance_ordering():
    assert thermal_resistance(P, 1.0) < thermal_resistance(P, 0.2)
    assert thermal_resistance(P, 1.0) == pytest.approx(0.1)
    assert thermal_resistance(P, 0.2) == pytest.approx(0.1 / 0.36)


@pytest.mark.parametrize("power", [50.0, 200.0, 275.0])
def test_steady_state_closed_form(power):
    temps = []
    for duty in (0.2, 0.4, 0.6, 1.0):
        oracle = 35.0 + power * 0.1 / (0.2 + 0.8 * duty)
        got = steady_state_temperature(P, lambda _t: power, lambda _t, d=duty: d)
        assert got == pytest.approx(oracle, rel=1e-10)
        temps.append(got)
    assert all(a > b for a, b in zip(temps, temps[1:]))


def test_min_stable_voltage_anchor():
    assert min_stable_voltage(G, 900) == pytest.approx(1.1425, abs=1e-12)
    assert min_stable_voltage(G, 900) > min_stable_voltage(G, 774)


@pytest.mark.parametrize("f", [200, 850, 1000])
def test_min_stable_voltage_unknown_step(f):
    with pytest.raises(ValueError):
        min_stable_voltage(G, f)


def test_governor_table_validation():
    with pytest.raises(ConfigError):
        GovernorParams(steps_mhz=())
    with pytest.raises(ConfigError):
        GovernorParams(steps_mhz=(774, 774))


def test_feasibility_boundary(s9150):
    # lowest bin at 900 MHz runs exactly on the stability floor with no offset
    assert is_feasible([(s9150, 1.1425)], op(900, 0.0), G)
    assert not is_feasible([(s9150, 1.1425)], op(900, -0.00625), G)
    assert is_feasible([(s9150, 1.1425)], op(774, -0.025), G)
    assert not is_feasible([(s9150, 1.1425)], op(774, -0.03125), G)
    assert not is_feasible([(s9150, 1.2)], op(850, 0.0), G)


def test_fan_curve_validation():
    with pytest.raises(ConfigError):
        FanCurve(((40, 0.6), (70, 0.4)))
    with pytest.raises(ConfigError):
        FanCurve(((40, 0.1),))
    with pytest.raises(ConfigError):
        FanCurve(((40, 0.5),), argument="rpm")
    curve = FanCurve(((50, 0.3), (70, 0.5)))
    assert curve.duty(40) == 0.3 and curve.duty(80) == 0.5
    assert curve.duty(60) == pytest.approx(0.4)


def test_load_curve_converts_to_temperature():
    curve = FanCurve(((0.3, 0.25), (1.0, 0.4)), argument="load")
    conv = temperature_fan_curve(curve, P, lambda load, t: gpu_power(P, 1.2, 774, t, load))
    assert conv.argument == "temperature"
    (t_lo, d_lo), (t_hi, d_hi) = conv.points
    assert (d_lo, d_hi) == (0.25, 0.4)
    assert t_lo < t_hi
    oracle_hi = steady_state_temperature(P, lambda t: gpu_power(P, 1.2, 774, t), lambda _t: 0.4)
    assert t_hi == pytest.approx(oracle_hi, rel=1e-12)


# -- governor ---------------------------------------------------------------

def test_low_vid_barely_throttles(s9150):
    tr = simulate_governor(s9150, 1.1425, op(900), P, G, DGEMM)
    assert tr.throttle_events == 0
    assert tr.mean_effective_freq_mhz == pytest.approx(900)


@pytest.mark.parametrize("vid", BINS)
def test_flat_profile_at_774(s9150, settings, vid):
    tr = simulate_governor(s9150, vid, op(774, -0.025), P, G, settings.profile)
    assert tr.throttle_events == 0
    assert np.all(tr.freq_mhz == 774)


def test_high_vid_oscillates(s9150):
    tr = simulate_governor(s9150, 1.2, op(900), P, G, DGEMM)
    assert tr.throttle_events > 5
    assert set(np.unique(tr.freq_mhz)) == {820.0, 900.0}


def test_oscillation_anomaly(s9150):
    governed = simulate_governor(s9150, 1.2, op(900), P, G, DGEMM)
    fixed = simulate_governor(s9150, 1.2, op(820), P, G, DGEMM)
    assert fixed.throttle_events == 0
    assert np.mean(fixed.flops_gflops) > np.mean(governed.flops_gflops)


def test_governor_rejects_unknown_clock(s9150):
    with pytest.raises(ValueError):
        simulate_governor(s9150, 1.2, op(850), P, G, DGEMM)


def test_governor_rejects_coarse_dt(s9150):
    with pytest.raises(ValueError):
        simulate_governor(s9150, 1.2, op(900), P, G, DGEMM, dt_s=0.5)


def test_trace_shape(s9150):
    tr = simulate_governor(s9150, 1.18, op(900), P, G, DGEMM)
    assert len(tr) == 601 and tr.dt_s == 0.1
    assert np.all(tr.power_w > 0)
    assert np.all(tr.temp_c >= P.t_ambient_c)
    assert len(tr.samples[0]) == 4


def test_trace_csv_roundtrip(tmp_path, s9150):
    from greensim.green500 import load_trace
    tr = simulate_governor(s9150, 1.2, op(900), P, G, LoadProfile.constant(5.0))
    tr.write_csv(tmp_path / "gpu.csv")
    back = load_trace(tmp_path / "gpu.csv")
    assert np.array_equal(back.watts, tr.power_w)
    assert np.allclose(back.t_s, np.arange(len(tr)) * 0.1, rtol=0, atol=1e-12)


@hsettings(max_examples=40, deadline=None)
@given(vid=st.sampled_from([v for v in np.round(np.arange(1.1, 1.20001, 0.0025), 4)]),
       offset=st.sampled_from([-0.05, -0.025, 0.0, 0.0125, 0.025]),
       duty=st.floats(0.2, 1.0), f=st.sampled_from([774.0, 820.0, 900.0]))
def test_tdp_excursions_last_one_period(s9150, vid, offset, duty, f):
    tr = simulate_governor(s9150, float(vid), op(f, offset, duty), P, G, LoadProfile.constant(30.0))
    assert longest_run_above(tr.power_w, s9150.tdp_w) <= 1


@hsettings(max_examples=20, deadline=None)
@given(vid=st.sampled_from(BINS), f=st.sampled_from([774.0, 820.0, 900.0]), duty=st.floats(0.2, 1.0))
def test_governor_deterministic(s9150, vid, f, duty):
    a = simulate_governor(s9150, vid, op(f, 0.0, duty), P, G, DGEMM)
    b = simulate_governor(s9150, vid, op(f, 0.0, duty), P, G, DGEMM)
    for name in ("freq_mhz", "power_w", "temp_c", "flops_gflops", "effective_freq_mhz"):
        assert getattr(a, name).tobytes() == getattr(b, name).tobytes()


@hsettings(max_examples=20, deadline=None)
@given(vid=st.sampled_from(BINS), duty=st.floats(0.2, 1.0))
def test_trace_energy_consistency(s9150, vid, duty):
    tr = simulate_governor(s9150, vid, op(900, 0.0, duty), P, G, DGEMM)
    oracle = math.fsum(tr.power_w.tolist()) * tr.dt_s
    assert tr.energy_j == pytest.approx(oracle, rel=1e-9)


@hsettings(max_examples=100, deadline=None)
@given(v1=st.floats(0.8, 1.3), dv=st.floats(1e-3, 0.2), f=st.floats(100, 1000), t=st.floats(40, 100))
def test_power_increasing_in_voltage(v1, dv, f, t):
    assert gpu_power(P, v1 + dv, f, t) > gpu_power(P, v1, f, t)


@hsettings(max_examples=100, deadline=None)
@given(v=st.floats(0.8, 1.3), f=st.floats(100, 1000), t=st.floats(40, 100), dt=st.floats(0.01, 20))
def test_power_increasing_in_temperature(v, f, t, dt):
    assert gpu_power(P, v, f, t + dt) > gpu_power(P, v, f, t)


@hsettings(max_examples=100, deadline=None)
@given(d=st.floats(0.0, 0.9), dd=st.floats(1e-3, 0.1))
def test_fan_power_increasing_convex(d, dd):
    d2 = min(d + dd, 1.0)
    assert fan_power(P, d2) > fan_power(P, d)
    mid = 0.5 * (d + d2)
    assert fan_power(P, mid) <= 0.5 * (fan_power(P, d) + fan_power(P, d2)) + 1e-12


# -- server -----------------------------------------------------------------

def test_usb_suspend_saves_20w(catalog, settings):
    node = catalog.nodes["lcsc-s9150"]
    traces = [simulate_governor(g, v, op(774, -0.025), P, G, DGEMM) for g, v in node.gpus]
    on = server_power(node, traces, OperatingPoint(774, -0.025, FanCurve.constant(0.4), usb_suspended=False), P)
    off = server_power(node, traces, OperatingPoint(774, -0.025, FanCurve.constant(0.4), usb_suspended=True), P)
    assert np.allclose(on - off, 20.0, rtol=0, atol=1e-9)


def test_idle_node_power(catalog):
    node = catalog.nodes["lcsc-s9150"]
    idle = [simulate_governor(g, v, op(900), P, G, np.zeros(20)) for g, v in node.gpus]
    watts = server_power(node, idle, op(900), P, cpu_load=0.0)
    # four idle boards, two idle sockets, static draw and fans at 40%; USB and disks off
    oracle = 4 * 20.0 + 2 * 25.0 + 49.0 + 240.0 * 0.4 ** 3
    assert np.allclose(watts, oracle, rtol=1e-12)


def test_server_rejects_misaligned(catalog):
    node = catalog.nodes["lcsc-s9150"]
    traces = [simulate_governor(g, v, op(900), P, G, np.ones(10 + i)) for i, (g, v) in enumerate(node.gpus)]
    with pytest.raises(ValueError):
        server_power(node, traces, op(900), P)


def test_tuned_node_power_near_1017w(green500, settings):
    run = run_hpl(green500, settings.operating_point("tuned"), settings.sim, settings.profile)
    oracle = (57200 - 257) / 56
    assert np.mean(run.node_mean_power_w) == pytest.approx(oracle, rel=5e-3)
