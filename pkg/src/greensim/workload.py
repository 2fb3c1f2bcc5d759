"""Workload models: DGEMM loop, multi-phase HPL run, bandwidth-bound Dslash."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np

from .catalog import ClusterSpec, ConfigError, GpuSpec, NodeSpec, cpu_peak_flops, gpu_peak_flops
from .green500 import PowerTrace, trapezoid_integral
from .power import (GovernorParams, OperatingPoint, PowerModelParams, SimTrace, server_power,
                    simulate_governor)


@dataclass(frozen=True)
class Phase:
    """A slice of the run. ``*_end`` set turns the phase into a linear ramp."""

    duration_fraction: float
    gpu_load: float
    cpu_load: float
    gpu_load_end: float | None = None
    cpu_load_end: float | None = None

    def __post_init__(self) -> None:
        if not 0 <= self.duration_fraction <= 1:
            raise ConfigError(f"phase duration_fraction {self.duration_fraction} outside [0, 1]")
        for name in ("gpu_load", "cpu_load", "gpu_load_end", "cpu_load_end"):
            val = getattr(self, name)
            if val is not None and not 0 <= val <= 1:
                raise ConfigError(f"phase {name} {val} outside [0, 1]")


@dataclass(frozen=True)
class LoadProfile:
    phases: tuple[Phase, ...]
    total_duration_s: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "phases", tuple(self.phases))
        if not self.phases:
            raise ConfigError("load profile has no phases")
        total = sum(p.duration_fraction for p in self.phases)
        if abs(total - 1.0) > 1e-9:
            raise ConfigError(f"phase duration fractions sum to {total}, expected 1")
        if not self.total_duration_s > 0:
            raise ConfigError("total_duration_s must be > 0")

    @classmethod
    def constant(cls, duration_s: float, gpu_load: float = 1.0, cpu_load: float = 1.0) -> LoadProfile:
        return cls((Phase(1.0, gpu_load, cpu_load),), duration_s)

    @classmethod
    def hpl_default(cls, duration_s: float = 300.0) -> LoadProfile:
        return cls((Phase(0.8, 1.0, 1.0), Phase(0.2, 1.0, 1.0, 0.3, 0.3)), duration_s)

    def _series(self, n: int, dt: float, which: str) -> np.ndarray:
        live = [p for p in self.phases if p.duration_fraction > 0]
        width = np.array([p.duration_fraction for p in live])
        bounds = np.cumsum(width)
        x = np.minimum(np.arange(n) * dt / self.total_duration_s, 1.0)
        idx = np.minimum(np.searchsorted(bounds, x, side="right"), len(live) - 1)
        a = np.array([getattr(p, which) for p in live])
        b = np.array([getattr(p, which) if getattr(p, which + "_end") is None
                      else getattr(p, which + "_end") for p in live])
        u = np.clip((x - (bounds - width)[idx]) / width[idx], 0.0, 1.0)
        return a[idx] + (b[idx] - a[idx]) * u

    def gpu_loads(self, n: int, dt: float) -> np.ndarray:
        return self._series(n, dt, "gpu_load")

    def cpu_loads(self, n: int, dt: float) -> np.ndarray:
        return self._series(n, dt, "cpu_load")

    def to_dict(self) -> dict[str, Any]:
        return {"total_duration_s": self.total_duration_s,
                "phases": [{k: v for k, v in vars(p).items() if v is not None} for p in self.phases]}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> LoadProfile:
        try:
            phases = tuple(Phase(**{k: v for k, v in p.items() if not k.startswith("_")})
                           for p in data["phases"])
            return cls(phases, float(data["total_duration_s"]))
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"load_profile: {exc}") from None


@dataclass(frozen=True)
class PerfModelParams:
    eps_dgemm: float = 0.493
    # HPL-GPU rate relative to the single-GPU DGEMM test; exceeds 1 (see README)
    eta_hpl: float = 1.1863735
    cpu_share: float = 0.5
    beta_dslash_gflops_per_gbs: float = 135.0 / 320.0
    dslash_clock_sensitivity: float = 0.05
    dgemm_duration_s: float = 60.0

    def __post_init__(self) -> None:
        for name in ("eps_dgemm", "cpu_share"):
            if not 0 < getattr(self, name) <= 1:
                raise ConfigError(f"perf_model.{name} must lie in (0, 1]")
        if not self.eta_hpl > 0 or not self.beta_dslash_gflops_per_gbs > 0:
            raise ConfigError("perf_model.eta_hpl and beta_dslash must be > 0")
        if self.dslash_clock_sensitivity < 0 or not self.dgemm_duration_s > 0:
            raise ConfigError("perf_model sensitivity/duration out of range")

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> PerfModelParams:
        try:
            return cls(**{k: v for k, v in data.items() if not k.startswith("_")})
        except TypeError as exc:
            raise ConfigError(f"perf_model: {exc}") from None


@dataclass(frozen=True)
class SimParams:
    power: PowerModelParams = field(default_factory=PowerModelParams)
    governor: GovernorParams = field(default_factory=GovernorParams)
    perf: PerfModelParams = field(default_factory=PerfModelParams)


class TraceCache:
    """Memoises governor runs; identical boards under identical settings share one run."""

    def __init__(self) -> None:
        self._store: dict[tuple, SimTrace] = {}

    def get(self, gpu: GpuSpec, vid: float, op: OperatingPoint, params: SimParams,
            profile: LoadProfile) -> SimTrace:
        key = (gpu, vid, op, params.power, params.governor, profile)
        trace = self._store.get(key)
        if trace is None:
            trace = simulate_governor(gpu, vid, op, params.power, params.governor, profile)
            self._store[key] = trace
        return trace


def dgemm_perf(gpu: GpuSpec, trace: SimTrace, params: PerfModelParams) -> float:
    if not len(trace):
        raise ValueError("empty trace")
    return params.eps_dgemm * gpu_peak_flops(gpu, trace.mean_effective_freq_mhz)


def _dgemm_profile(params: SimParams) -> LoadProfile:
    return LoadProfile.constant(params.perf.dgemm_duration_s, 1.0, 1.0)


def hpl_node_perf(node: NodeSpec, op_point: OperatingPoint, params: SimParams,
                  cache: TraceCache | None = None) -> float:
    cache = cache or TraceCache()
    profile = _dgemm_profile(params)
    gpus = sum(dgemm_perf(g, cache.get(g, vid, op_point, params, profile), params.perf)
               for g, vid in node.gpus)
    cpus = sum(cpu_peak_flops(c, op_point.cpu_clock_ghz) for c in node.cpus)
    return params.perf.eta_hpl * (gpus + params.perf.cpu_share * cpus)


def node_perfs(cluster: ClusterSpec, op_point: OperatingPoint, params: SimParams,
               cache: TraceCache | None = None) -> list[float]:
    cache = cache or TraceCache()
    memo: dict[NodeSpec, float] = {}
    out = []
    for node in cluster.nodes:
        if node not in memo:
            memo[node] = hpl_node_perf(node, op_point, params, cache)
        out.append(memo[node])
    return out


def min_rule(perfs: Sequence[float]) -> float:
    """Slowest node sets the pace: ``n_nodes * min(node perf)``."""
    if not len(perfs):
        raise ValueError("empty cluster")
    return len(perfs) * min(perfs)


def hpl_cluster_perf(cluster: ClusterSpec, op_point: OperatingPoint, params: SimParams,
                     cache: TraceCache | None = None) -> float:
    if not cluster.nodes:
        raise ValueError("empty cluster")
    return min_rule(node_perfs(cluster, op_point, params, cache))


@dataclass
class HplRun:
    gflops: float
    trace: PowerTrace
    energy_j: float
    node_perfs: list[float]
    node_mean_power_w: list[float]
    throttle_events: int
    node_traces: dict[str, PowerTrace] = field(default_factory=dict)

    @property
    def mean_power_w(self) -> float:
        return self.trace.average_power()

    @property
    def mflops_per_w(self) -> float:
        return self.gflops * 1000.0 / self.mean_power_w


def run_hpl(cluster: ClusterSpec, op_point: OperatingPoint, params: SimParams, profile: LoadProfile,
            cache: TraceCache | None = None, keep_node_traces: bool = False) -> HplRun:
    """Simulate a full HPL run and assemble the cluster power trace (servers + network)."""
    cache = cache or TraceCache()
    dt = params.governor.control_period_s
    n = int(round(profile.total_duration_s / dt)) + 1
    cpu_load = profile.cpu_loads(n, dt)

    node_power: dict[NodeSpec, np.ndarray] = {}
    node_events: dict[NodeSpec, int] = {}
    for node in cluster.nodes:
        if node in node_power:
            continue
        traces = [cache.get(g, vid, op_point, params, profile) for g, vid in node.gpus]
        node_power[node] = server_power(node, traces, op_point, params.power, cpu_load)
        node_events[node] = sum(tr.throttle_events for tr in traces)

    total = np.zeros(n)
    for node in cluster.nodes:
        total = total + node_power[node]
    total = total + cluster.switch_power_w
    t = np.arange(n) * dt
    trace = PowerTrace(t, total, "cluster")
    perfs = node_perfs(cluster, op_point, params, cache)
    node_traces = {}
    if keep_node_traces:
        node_traces = {f"node{i:03d}": PowerTrace(t, node_power[nd], f"node{i:03d}")
                       for i, nd in enumerate(cluster.nodes)}
    span = t[-1] - t[0]
    return HplRun(
        gflops=min_rule(perfs),
        trace=trace,
        energy_j=trapezoid_integral(t, total),
        node_perfs=perfs,
        node_mean_power_w=[trapezoid_integral(t, node_power[nd]) / span for nd in cluster.nodes],
        throttle_events=sum(node_events[nd] for nd in cluster.nodes),
        node_traces=node_traces,
    )


def dslash_perf(gpu: GpuSpec, params: PerfModelParams) -> float:
    """Per-chip Dslash rate; memory bound, so proportional to bandwidth alone."""
    return params.beta_dslash_gflops_per_gbs * gpu.bandwidth_per_chip_gbs


def cluster_dslash_perf(cluster: ClusterSpec, params: PerfModelParams) -> float:
    return sum(g.chips_per_board * dslash_perf(g, params) for node in cluster.nodes for g, _ in node.gpus)


def dslash_frequency_sensitivity(stock: OperatingPoint, tuned: OperatingPoint,
                                 params: PerfModelParams) -> float:
    """Fractional Dslash slowdown when moving from ``stock`` to ``tuned`` clocks."""
    return params.dslash_clock_sensitivity * (1.0 - tuned.gpu_clock_mhz / stock.gpu_clock_mhz)


def per_node_spread(perfs: Sequence[float]) -> float:
    hi = max(perfs)
    return (hi - min(perfs)) / hi if hi > 0 else 0.0
