"""GPU power, fan/thermal model and the discrete-time TDP governor.

Board power follows ``P = P_idle + load * alpha * f * V**2 + gamma * (T - T_ref)``
(clamped at ``P_idle``). Fans follow the cubic affinity law. The die
temperature relaxes towards ``T_amb + P * theta(duty)`` with time constant
``tau``.

Voltage model: a chip's VID is its stock voltage at the board's base clock.
Its stock DVFS table lowers the voltage by ``dvfs_slope`` per MHz below base.
The stability floor ``min_stable_voltage(f)`` falls faster than the stock
table, which is the undervolting headroom the tuner exploits at reduced
clocks.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Sequence

import numpy as np
from scipy.optimize import brentq

from .catalog import ConfigError, GpuSpec, NodeSpec, gpu_peak_flops

FEASIBILITY_TOL_V = 1e-9


@dataclass(frozen=True)
class PowerModelParams:
    alpha_dyn: float = 0.1871141975308642
    p_idle_gpu_w: float = 20.0
    gamma_leak_w_per_k: float = 0.5
    t_ref_c: float = 60.0
    fan_pmax_w: float = 240.0
    theta0_k_per_w: float = 0.1
    tau_s: float = 20.0
    t_ambient_c: float = 35.0
    # per CPU socket: idle draw plus full-load draw per GHz
    cpu_idle_w: float = 25.0
    cpu_w_per_ghz: float = 30.0

    def __post_init__(self) -> None:
        for name in ("alpha_dyn", "p_idle_gpu_w", "gamma_leak_w_per_k", "fan_pmax_w",
                     "theta0_k_per_w", "tau_s"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"power_model.{name} must be > 0")
        if self.cpu_idle_w < 0 or self.cpu_w_per_ghz < 0:
            raise ConfigError("power_model CPU terms must be >= 0")

    @staticmethod
    def solve_alpha(tdp_w: float, v: float, f_mhz: float, t_limit_c: float,
                    p_idle_gpu_w: float, gamma_leak_w_per_k: float, t_ref_c: float) -> float:
        """Dynamic coefficient that puts ``gpu_power(v, f, t_limit)`` exactly at ``tdp_w``."""
        alpha = (tdp_w - p_idle_gpu_w - gamma_leak_w_per_k * (t_limit_c - t_ref_c)) / (f_mhz * v * v)
        if alpha <= 0:
            raise ConfigError("calibration leaves no room for dynamic power")
        return alpha

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> PowerModelParams:
        data = {k: v for k, v in data.items() if not k.startswith("_")}
        calib = data.pop("calibration", None)
        if data.get("alpha_dyn") == "calibrate" or (calib and "alpha_dyn" not in data):
            if not calib:
                raise ConfigError("power_model.alpha_dyn='calibrate' needs a calibration block")
            base = cls.__dataclass_fields__
            pick = lambda k: data.get(k, base[k].default)  # noqa: E731
            data["alpha_dyn"] = cls.solve_alpha(
                calib["tdp_w"], calib["v"], calib["f_mhz"], calib["t_limit_c"],
                pick("p_idle_gpu_w"), pick("gamma_leak_w_per_k"), pick("t_ref_c"))
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(f"power_model: {exc}") from None


@dataclass(frozen=True)
class GovernorParams:
    steps_mhz: tuple[float, ...] = (300.0, 774.0, 820.0, 900.0)
    control_period_s: float = 0.1
    dwell_s: float = 1.0
    # pipeline stall charged to every clock transition
    switch_stall_s: float = 0.2
    vmin_intercept_v: float = 0.5125
    vmin_slope_v_per_mhz: float = 0.0007
    dvfs_slope_v_per_mhz: float = 0.0005

    def __post_init__(self) -> None:
        steps = tuple(sorted(float(s) for s in self.steps_mhz))
        if not steps:
            raise ConfigError("governor.steps_mhz is empty")
        if len(set(steps)) != len(steps) or steps[0] <= 0:
            raise ConfigError("governor.steps_mhz must be distinct positive values")
        object.__setattr__(self, "steps_mhz", steps)
        if not self.control_period_s > 0 or self.dwell_s < 0 or self.switch_stall_s < 0:
            raise ConfigError("governor timing values out of range")
        if self.vmin_slope_v_per_mhz <= 0:
            raise ConfigError("governor.vmin_slope_v_per_mhz must be > 0")

    def step_index(self, f_mhz: float) -> int:
        for i, s in enumerate(self.steps_mhz):
            if abs(s - f_mhz) < 1e-9:
                return i
        raise ValueError(f"{f_mhz} MHz is not a governor step {list(self.steps_mhz)}")

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> GovernorParams:
        data = {k: v for k, v in data.items() if not k.startswith("_")}
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(f"governor: {exc}") from None


@dataclass(frozen=True)
class FanCurve:
    """Piecewise-linear duty curve, flat beyond its end points."""

    points: tuple[tuple[float, float], ...]
    argument: str = "temperature"

    def __post_init__(self) -> None:
        pts = tuple(sorted((float(x), float(d)) for x, d in self.points))
        if not pts:
            raise ConfigError("fan curve needs at least one point")
        if self.argument not in ("temperature", "load"):
            raise ConfigError(f"fan curve argument must be 'temperature' or 'load', got {self.argument!r}")
        for (x0, d0), (x1, d1) in zip(pts, pts[1:]):
            if x1 == x0:
                raise ConfigError("fan curve has duplicate abscissae")
            if d1 < d0:
                raise ConfigError("fan curve duty must be non-decreasing")
        if any(not 0.2 <= d <= 1.0 for _, d in pts):
            raise ConfigError("fan curve duties must lie in [0.2, 1.0]")
        object.__setattr__(self, "points", pts)

    @classmethod
    def constant(cls, duty: float) -> FanCurve:
        return cls(((0.0, duty),))

    @property
    def is_constant(self) -> bool:
        return len(self.points) == 1 or self.points[0][1] == self.points[-1][1]

    @property
    def max_duty(self) -> float:
        return self.points[-1][1]

    def duty(self, x: float) -> float:
        pts = self.points
        if x <= pts[0][0]:
            return pts[0][1]
        if x >= pts[-1][0]:
            return pts[-1][1]
        for (x0, d0), (x1, d1) in zip(pts, pts[1:]):
            if x <= x1:
                return d0 + (d1 - d0) * (x - x0) / (x1 - x0)
        return pts[-1][1]

    def to_dict(self) -> dict[str, Any]:
        return {"argument": self.argument, "points": [list(p) for p in self.points]}

    @classmethod
    def from_dict(cls, data: Any) -> FanCurve:
        if isinstance(data, (int, float)):
            return cls.constant(float(data))
        try:
            return cls(tuple(tuple(p) for p in data["points"]), data.get("argument", "temperature"))
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"fan_curve: malformed ({exc})") from None


@dataclass(frozen=True)
class OperatingPoint:
    gpu_clock_mhz: float
    voltage_offset_v: float = 0.0
    fan_curve: FanCurve = field(default_factory=lambda: FanCurve.constant(0.4))
    cpu_clock_ghz: float | None = None
    # None keeps each node's own USB setting
    usb_suspended: bool | None = None

    def to_dict(self) -> dict[str, Any]:
        return {"gpu_clock_mhz": self.gpu_clock_mhz, "voltage_offset_v": self.voltage_offset_v,
                "fan_curve": self.fan_curve.to_dict(), "cpu_clock_ghz": self.cpu_clock_ghz,
                "usb_suspended": self.usb_suspended}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> OperatingPoint:
        try:
            return cls(gpu_clock_mhz=float(data["gpu_clock_mhz"]),
                       voltage_offset_v=float(data.get("voltage_offset_v", 0.0)),
                       fan_curve=FanCurve.from_dict(data.get("fan_curve", 0.4)),
                       cpu_clock_ghz=data.get("cpu_clock_ghz"),
                       usb_suspended=data.get("usb_suspended"))
        except KeyError as exc:
            raise ConfigError(f"operating point: missing field {exc}") from None


@dataclass
class SimTrace:
    """Uniformly sampled governor output; sample ``k`` sits at ``k * dt_s``."""

    dt_s: float
    freq_mhz: np.ndarray
    power_w: np.ndarray
    temp_c: np.ndarray
    flops_gflops: np.ndarray
    fan_duty: np.ndarray
    effective_freq_mhz: np.ndarray
    throttle_events: int = 0
    up_events: int = 0

    def __len__(self) -> int:
        return len(self.power_w)

    @property
    def samples(self) -> list[tuple[float, float, float, float]]:
        return list(zip(self.freq_mhz.tolist(), self.power_w.tolist(),
                        self.temp_c.tolist(), self.flops_gflops.tolist()))

    @property
    def energy_j(self) -> float:
        return float(np.sum(self.power_w) * self.dt_s)

    @property
    def mean_effective_freq_mhz(self) -> float:
        if not len(self):
            raise ValueError("empty trace")
        return float(np.mean(self.effective_freq_mhz))

    def write_csv(self, path, channel: str = "gpu") -> None:
        """Export power in the ``t_s,watts,channel`` trace format."""
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t_s", "watts", "channel"])
            for k, p in enumerate(self.power_w.tolist()):
                w.writerow([repr(k * self.dt_s), repr(p), channel])


# -- analytic pieces --------------------------------------------------------

def gpu_power(params: PowerModelParams, v: float, f: float, t: float, load: float = 1.0) -> float:
    if not v > 0 or f < 0 or not -273.15 < t < 1000 or not 0 <= load <= 1:
        raise ValueError(f"gpu_power outside model domain (v={v}, f={f}, t={t}, load={load})")
    p = (params.p_idle_gpu_w + load * params.alpha_dyn * f * v * v
         + params.gamma_leak_w_per_k * (t - params.t_ref_c))
    return max(p, params.p_idle_gpu_w)


def fan_power(params: PowerModelParams, duty: float) -> float:
    if not 0 <= duty <= 1:
        raise ValueError(f"fan duty must lie in [0, 1], got {duty}")
    return params.fan_pmax_w * duty ** 3


def thermal_resistance(params: PowerModelParams, duty: float) -> float:
    return params.theta0_k_per_w / (0.2 + 0.8 * duty)


def step_thermal(params: PowerModelParams, t: float, power_w: float, duty: float, dt_s: float) -> float:
    if not dt_s > 0:
        raise ValueError("dt_s must be > 0")
    target = power_w * thermal_resistance(params, duty) + params.t_ambient_c
    return t + dt_s * (target - t) / params.tau_s


def steady_state_temperature(params: PowerModelParams, power_at: Callable[[float], float],
                             duty_at: Callable[[float], float]) -> float:
    """Fixed point of ``T = T_amb + P(T) * theta(duty(T))``."""
    def residual(t: float) -> float:
        return params.t_ambient_c + power_at(t) * thermal_resistance(params, duty_at(t)) - t

    lo = params.t_ambient_c
    hi = lo + 900.0
    if residual(lo) <= 0:
        return lo
    if residual(hi) > 0:
        raise ValueError("no thermal steady state (leakage feedback too strong)")
    return brentq(residual, lo, hi, xtol=1e-12)


def min_stable_voltage(governor: GovernorParams, f_mhz: float) -> float:
    governor.step_index(f_mhz)
    return governor.vmin_intercept_v + governor.vmin_slope_v_per_mhz * f_mhz


def chip_voltage(gpu: GpuSpec, vid: float, f_mhz: float, offset_v: float,
                 governor: GovernorParams) -> float:
    """Operating voltage of a chip at ``f_mhz``: its stock DVFS entry plus the offset."""
    return vid + offset_v - governor.dvfs_slope_v_per_mhz * (gpu.base_clock_mhz - f_mhz)


def voltage_headroom(gpu: GpuSpec, vid: float, f_mhz: float, governor: GovernorParams) -> float:
    """Largest negative offset a chip tolerates at ``f_mhz`` (as a positive number)."""
    return chip_voltage(gpu, vid, f_mhz, 0.0, governor) - min_stable_voltage(governor, f_mhz)


def is_feasible(gpus: Sequence[tuple[GpuSpec, float]], op: OperatingPoint,
                governor: GovernorParams) -> bool:
    try:
        governor.step_index(op.gpu_clock_mhz)
    except ValueError:
        return False
    return all(voltage_headroom(g, vid, op.gpu_clock_mhz, governor) + op.voltage_offset_v
               >= -FEASIBILITY_TOL_V for g, vid in gpus)


def temperature_fan_curve(curve: FanCurve, params: PowerModelParams,
                          power_at_load: Callable[[float, float], float]) -> FanCurve:
    """Convert a load-indexed curve to a temperature-indexed one.

    Each ``(load, duty)`` point maps to ``(T_ss, duty)`` where ``T_ss`` is the
    steady-state temperature at that load and duty.
    """
    if curve.argument == "temperature":
        return curve
    pts = []
    for load, duty in curve.points:
        t_ss = steady_state_temperature(params, lambda t, L=load: power_at_load(L, t), lambda _t, d=duty: d)
        pts.append((t_ss, duty))
    try:
        return FanCurve(tuple(pts), "temperature")
    except ConfigError as exc:
        raise ConfigError(f"load-indexed fan curve has no monotone temperature image: {exc}") from None


# -- governor ---------------------------------------------------------------

def simulate_governor(gpu: GpuSpec, vid: float, op_point: OperatingPoint, params: PowerModelParams,
                      governor: GovernorParams, load, duration_s: float | None = None,
                      dt_s: float | None = None, t_start_c: float | None = None) -> SimTrace:
    """Run the TDP governor for one board.

    ``load`` is a LoadProfile-like object (``gpu_loads(n, dt)`` and
    ``total_duration_s``) or a per-sample sequence of GPU load fractions.
    The board starts at the set clock and, unless ``t_start_c`` is given, at
    the steady-state temperature of that clock and the first load sample.
    """
    dt = governor.control_period_s if dt_s is None else dt_s
    if not 0 < dt <= 0.1 + 1e-12:
        raise ValueError(f"dt_s must lie in (0, 0.1], got {dt}")
    if hasattr(load, "gpu_loads"):
        duration = load.total_duration_s if duration_s is None else duration_s
        n = int(round(duration / dt)) + 1
        loads = load.gpu_loads(n, dt)
    else:
        loads = np.asarray(load, dtype=float)
        n = len(loads)
    if n == 0:
        raise ValueError("empty load series")
    steps = governor.steps_mhz
    top = governor.step_index(op_point.gpu_clock_mhz)
    volts = [chip_voltage(gpu, vid, s, op_point.voltage_offset_v, governor) for s in steps]
    if volts[0] <= 0:
        raise ValueError("voltage offset drives the lowest step to a non-positive voltage")
    tdp = gpu.tdp_w
    per_control = max(1, int(round(governor.control_period_s / dt)))
    dwell_checks = int(math.ceil(governor.dwell_s / governor.control_period_s - 1e-9))

    p_idle, alpha = params.p_idle_gpu_w, params.alpha_dyn
    gamma, t_ref = params.gamma_leak_w_per_k, params.t_ref_c
    t_amb, tau, theta0 = params.t_ambient_c, params.tau_s, params.theta0_k_per_w

    def power(i: int, t: float, load_: float) -> float:
        f = steps[i]
        v = volts[i]
        p = p_idle + load_ * alpha * f * v * v + gamma * (t - t_ref)
        return p if p > p_idle else p_idle

    curve = op_point.fan_curve
    if curve.argument == "load":
        curve = temperature_fan_curve(curve, params, lambda L, t: power(top, t, L))
    const_duty = curve.points[0][1] if curve.is_constant else None
    duty_of = curve.duty

    temp = t_start_c
    if temp is None:
        l0 = float(loads[0])
        temp = steady_state_temperature(
            params, lambda t: power(top, t, l0),
            (lambda _t: const_duty) if const_duty is not None else duty_of)

    peak_per_mhz = gpu_peak_flops(gpu, 1.0)
    freq = np.empty(n)
    pw = np.empty(n)
    tc = np.empty(n)
    duty_arr = np.empty(n)
    eff = np.empty(n)
    cur = top
    ok_checks = 0
    stall_left = 0.0
    downs = ups = 0
    loads_l = loads.tolist()
    for k in range(n):
        load_k = loads_l[k]
        p = power(cur, temp, load_k)
        duty = const_duty if const_duty is not None else duty_of(temp)
        f = steps[cur]
        lost = stall_left if stall_left < dt else dt
        stall_left -= lost
        freq[k] = f
        pw[k] = p
        tc[k] = temp
        duty_arr[k] = duty
        eff[k] = f * (1.0 - lost / dt)
        if k % per_control == per_control - 1 or per_control == 1:
            if p > tdp:
                ok_checks = 0
                if cur > 0:
                    cur -= 1
                    downs += 1
                    stall_left += governor.switch_stall_s
            elif cur < top:
                if power(cur + 1, temp, load_k) <= tdp:
                    ok_checks += 1
                else:
                    ok_checks = 0
                if ok_checks >= dwell_checks:
                    cur += 1
                    ups += 1
                    ok_checks = 0
                    stall_left += governor.switch_stall_s
        theta = theta0 / (0.2 + 0.8 * duty)
        temp = temp + dt * (p * theta + t_amb - temp) / tau
    flops = eff * peak_per_mhz * loads
    return SimTrace(dt_s=dt, freq_mhz=freq, power_w=pw, temp_c=tc, flops_gflops=flops,
                    fan_duty=duty_arr, effective_freq_mhz=eff, throttle_events=downs, up_events=ups)


# -- whole server -----------------------------------------------------------

def cpu_power(params: PowerModelParams, node: NodeSpec, op_point: OperatingPoint, cpu_load) -> np.ndarray:
    load = np.asarray(cpu_load, dtype=float)
    total = np.zeros_like(load)
    for cpu in node.cpus:
        clock = cpu.clock_ghz if op_point.cpu_clock_ghz is None else float(op_point.cpu_clock_ghz)
        total = total + params.cpu_idle_w + params.cpu_w_per_ghz * clock * load
    return total


def usb_active(node: NodeSpec, op_point: OperatingPoint) -> bool:
    suspended = node.usb_suspended if op_point.usb_suspended is None else op_point.usb_suspended
    return not suspended


def server_power(node: NodeSpec, per_gpu_traces: Sequence[SimTrace], op_point: OperatingPoint,
                 params: PowerModelParams, cpu_load=1.0) -> np.ndarray:
    """Full-server draw per sample.

    The chassis fans follow the hottest board, so the node fan duty at each
    sample is the maximum over the boards' duties.
    """
    if len(per_gpu_traces) != len(node.gpus):
        raise ValueError(f"expected {len(node.gpus)} GPU traces, got {len(per_gpu_traces)}")
    if per_gpu_traces:
        n, dt = len(per_gpu_traces[0]), per_gpu_traces[0].dt_s
        if any(len(tr) != n or abs(tr.dt_s - dt) > 1e-12 for tr in per_gpu_traces):
            raise ValueError("GPU traces are not aligned in time")
        gpu_total = np.sum([tr.power_w for tr in per_gpu_traces], axis=0)
        duty = np.max([tr.fan_duty for tr in per_gpu_traces], axis=0)
    else:
        n = np.size(cpu_load)
        gpu_total = np.zeros(n)
        curve = op_point.fan_curve
        duty = np.full(n, curve.duty(0.0 if curve.argument == "load" else params.t_ambient_c))
    load = np.broadcast_to(np.asarray(cpu_load, dtype=float), (n,))
    total = gpu_total + cpu_power(params, node, op_point, load) + node.static_power_w
    total = total + params.fan_pmax_w * duty ** 3
    if usb_active(node, op_point):
        total = total + node.usb_power_w
    if not node.disks_disabled:
        total = total + node.disk_power_w
    return total
