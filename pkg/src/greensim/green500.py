"""Green500-style power measurement: traces, level rules, efficiency, extrapolation.

Level rules (methodology revision 1.2 as used here):

=====  ==========================  =============================  ==============================
Level  Components                  Measured fraction of system    Window
=====  ==========================  =============================  ==============================
1      compute nodes only          >= 1/64                        >= 20% of the middle 80% of run
2      cluster + estimated network >= 1/8                         full run
3      cluster + measured network  full system                    full run
=====  ==========================  =============================  ==============================

The middle 80% is ``[start + 10%, end - 10%]`` of wall time. Averages are
time-weighted (trapezoidal).
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from functools import cached_property
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

TRACE_HEADER = ["t_s", "watts", "channel"]
NETWORK_MODES = ("measured", "estimated", "absent")
LEVEL1_MIN_FRACTION = Fraction(1, 64)
LEVEL2_MIN_FRACTION = Fraction(1, 8)
LEVEL1_WINDOW_SHARE = 0.2
MIDDLE_SHARE = 0.8
_REL_TOL = 1e-9


class TraceFormatError(ValueError):
    """Malformed power-trace file; the message names the offending line."""


def trapezoid_integral(t, p) -> float:
    return float(np.trapezoid(np.asarray(p, dtype=float), np.asarray(t, dtype=float)))


class PowerTrace:
    """Power samples ``(t_s, watts)`` of one channel with strictly increasing time."""

    def __init__(self, t_s, watts, channel: str = "cluster") -> None:
        t = np.asarray(t_s, dtype=float)
        w = np.asarray(watts, dtype=float)
        if t.ndim != 1 or t.shape != w.shape:
            raise ValueError("t_s and watts must be 1-D and of equal length")
        if len(t) == 0:
            raise ValueError("power trace is empty")
        if np.any(np.diff(t) <= 0):
            raise ValueError("timestamps must be strictly increasing")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValueError("watts must be finite and >= 0")
        self.t_s = t
        self.watts = w
        self.channel = channel

    def __len__(self) -> int:
        return len(self.t_s)

    def __eq__(self, other: object) -> bool:
        return (isinstance(other, PowerTrace) and self.channel == other.channel
                and np.array_equal(self.t_s, other.t_s) and np.array_equal(self.watts, other.watts))

    def __repr__(self) -> str:
        return f"PowerTrace({self.channel!r}, n={len(self)}, span=[{self.start}, {self.end}])"

    @property
    def samples(self) -> list[tuple[float, float]]:
        return list(zip(self.t_s.tolist(), self.watts.tolist()))

    @property
    def start(self) -> float:
        return float(self.t_s[0])

    @property
    def end(self) -> float:
        return float(self.t_s[-1])

    @cached_property
    def _cumulative(self) -> np.ndarray:
        # integral of (watts - watts[0]); the shift keeps flat stretches exact
        d = self.watts - self.watts[0]
        seg = 0.5 * (d[1:] + d[:-1]) * np.diff(self.t_s)
        return np.concatenate(([0.0], np.cumsum(seg)))

    def value_at(self, x) -> np.ndarray:
        return np.interp(x, self.t_s, self.watts)

    def shifted_integral_at(self, x) -> np.ndarray:
        """Integral of ``watts - watts[0]`` from the first sample to ``x``."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        k = np.clip(np.searchsorted(self.t_s, x, side="right") - 1, 0, len(self) - 1)
        ref = self.watts[0]
        dx = x - self.t_s[k]
        px = self.value_at(x)
        return self._cumulative[k] + 0.5 * dx * ((self.watts[k] - ref) + (px - ref))

    def average_power(self, t0: float | None = None, t1: float | None = None) -> float:
        return average_power(self, self.start if t0 is None else t0, self.end if t1 is None else t1)

    @property
    def energy_j(self) -> float:
        return trapezoid_integral(self.t_s, self.watts)


def _span_tol(trace: PowerTrace) -> float:
    return _REL_TOL * max(1.0, abs(trace.end - trace.start), abs(trace.end))


def average_power(trace: PowerTrace, t0: float, t1: float) -> float:
    """Time-weighted mean power over ``[t0, t1]``."""
    tol = _span_tol(trace)
    if t1 < t0:
        raise ValueError(f"empty window [{t0}, {t1}]")
    if t0 < trace.start - tol or t1 > trace.end + tol:
        raise ValueError(f"window [{t0}, {t1}] outside trace span [{trace.start}, {trace.end}]")
    t0 = min(max(t0, trace.start), trace.end)
    t1 = min(max(t1, trace.start), trace.end)
    if t1 == t0:
        return float(trace.value_at(t0))
    i0, i1 = trace.shifted_integral_at([t0, t1])
    return float(trace.watts[0] + (i1 - i0) / (t1 - t0))


# -- file format ------------------------------------------------------------

def load_traces(path: str | os.PathLike) -> dict[str, PowerTrace]:
    """Read a ``t_s,watts,channel`` CSV; returns channels in file order."""
    path = Path(path)
    cols: dict[str, tuple[list[float], list[float]]] = {}
    try:
        fh = open(path, newline="", encoding="utf-8")
    except FileNotFoundError:
        raise TraceFormatError(f"trace file not found: {path}") from None
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != TRACE_HEADER:
            raise TraceFormatError(f"{path}:1: expected header {','.join(TRACE_HEADER)}, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise TraceFormatError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
            try:
                t, w = float(row[0]), float(row[1])
            except ValueError:
                raise TraceFormatError(f"{path}:{lineno}: non-numeric value in {row[:2]}") from None
            if not (math.isfinite(t) and math.isfinite(w)):
                raise TraceFormatError(f"{path}:{lineno}: non-finite value")
            if w < 0:
                raise TraceFormatError(f"{path}:{lineno}: negative watts {w}")
            ch = row[2]
            ts, ws = cols.setdefault(ch, ([], []))
            if ts and t <= ts[-1]:
                raise TraceFormatError(f"{path}:{lineno}: time {t} does not increase in channel {ch!r}")
            ts.append(t)
            ws.append(w)
    if not cols:
        raise TraceFormatError(f"{path}: no samples")
    return {ch: PowerTrace(ts, ws, ch) for ch, (ts, ws) in cols.items()}


def load_trace(path: str | os.PathLike, channel: str | None = None) -> PowerTrace:
    traces = load_traces(path)
    if channel is not None:
        if channel not in traces:
            raise TraceFormatError(f"{path}: no channel {channel!r} (have {sorted(traces)})")
        return traces[channel]
    if len(traces) > 1:
        raise TraceFormatError(f"{path}: several channels {list(traces)}; pick one")
    return next(iter(traces.values()))


def write_traces(path: str | os.PathLike, traces: Iterable[PowerTrace]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_HEADER)
        for tr in traces:
            for t, p in zip(tr.t_s.tolist(), tr.watts.tolist()):
                w.writerow([repr(t), repr(p), tr.channel])


def write_trace(path: str | os.PathLike, trace: PowerTrace) -> None:
    write_traces(path, [trace])


# -- metadata and reports ---------------------------------------------------

@dataclass
class RunMetadata:
    run_start_s: float
    run_end_s: float
    nodes_total: int
    nodes_measured: int
    network_included: str = "absent"
    network_estimate_w: float = 0.0
    gflops: float | None = None
    flops_total: float | None = None
    node_efficiencies: list[float] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.run_end_s > self.run_start_s:
            raise ValueError("run_end_s must exceed run_start_s")
        if self.nodes_total < 1 or not 1 <= self.nodes_measured <= self.nodes_total:
            raise ValueError("need 1 <= nodes_measured <= nodes_total")
        if self.network_included not in NETWORK_MODES:
            raise ValueError(f"network_included must be one of {NETWORK_MODES}")
        if self.network_estimate_w < 0:
            raise ValueError("network_estimate_w must be >= 0")

    @property
    def duration_s(self) -> float:
        return self.run_end_s - self.run_start_s

    @property
    def sustained_gflops(self) -> float:
        if self.gflops is not None:
            return float(self.gflops)
        if self.flops_total is not None:
            return self.flops_total / 1e9 / self.duration_s
        raise ValueError("metadata carries neither gflops nor flops_total")

    @property
    def middle_window(self) -> tuple[float, float]:
        edge = 0.5 * (1 - MIDDLE_SHARE) * self.duration_s
        return self.run_start_s + edge, self.run_end_s - edge

    @property
    def level1_window_length(self) -> float:
        return LEVEL1_WINDOW_SHARE * MIDDLE_SHARE * self.duration_s

    def to_dict(self) -> dict[str, Any]:
        return {k: v for k, v in asdict(self).items() if v is not None}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> RunMetadata:
        try:
            return cls(**{k: v for k, v in data.items() if not k.startswith("_")})
        except TypeError as exc:
            raise ValueError(f"run metadata: {exc}") from None

    @classmethod
    def load(cls, path: str | os.PathLike) -> RunMetadata:
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass
class MeasurementReport:
    level: int | None
    window: tuple[float, float]
    avg_power_w: float
    efficiency_mflops_per_w: float
    extrapolation_error_bound: float | None
    compliant: bool

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["window"] = list(self.window)
        return d


def efficiency(gflops: float, avg_power_w: float) -> float:
    """Green500 metric in MFLOPS/W."""
    if not avg_power_w > 0:
        raise ValueError(f"average power must be > 0, got {avg_power_w}")
    if not gflops > 0:
        raise ValueError(f"gflops must be > 0, got {gflops}")
    return gflops * 1000.0 / avg_power_w


def classify_level(meta: RunMetadata, window: tuple[float, float]) -> int | None:
    """Highest level the measurement satisfies, or ``None`` if non-compliant."""
    t0, t1 = window
    tol = _REL_TOL * max(1.0, meta.duration_s, abs(meta.run_end_s))
    frac = Fraction(meta.nodes_measured, meta.nodes_total)
    full_run = t0 <= meta.run_start_s + tol and t1 >= meta.run_end_s - tol
    if frac == 1 and meta.network_included == "measured" and full_run:
        return 3
    if frac >= LEVEL2_MIN_FRACTION and full_run and meta.network_included != "absent":
        return 2
    m0, m1 = meta.middle_window
    overlap = max(0.0, min(t1, m1) - max(t0, m0))
    if frac >= LEVEL1_MIN_FRACTION and overlap >= meta.level1_window_length - tol:
        return 1
    return None


def extrapolate_total_power(node_traces: Sequence[PowerTrace], nodes_total: int,
                            network: PowerTrace | float | None = None) -> PowerTrace:
    """Scale the mean measured node draw to ``nodes_total`` nodes and add the network."""
    if not node_traces:
        raise ValueError("need at least one measured node trace")
    t = node_traces[0].t_s
    for tr in node_traces[1:]:
        if not np.array_equal(tr.t_s, t):
            raise ValueError(f"node trace {tr.channel!r} is not aligned with {node_traces[0].channel!r}")
    total = np.mean([tr.watts for tr in node_traces], axis=0) * nodes_total
    if isinstance(network, PowerTrace):
        total = total + network.value_at(t)
    elif network:
        total = total + float(network)
    return PowerTrace(t, total, "cluster")


def node_variability(efficiencies: Sequence[float]) -> float:
    """Population standard deviation over mean."""
    values = np.asarray(efficiencies, dtype=float)
    if len(values) < 2:
        raise ValueError("need at least two values")
    return float(np.std(values) / np.mean(values))


@dataclass
class ExploitResult:
    window: tuple[float, float]
    window_avg_power_w: float
    full_avg_power_w: float
    inflated_efficiency: float
    full_efficiency: float
    inflation_ratio: float

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["window"] = list(self.window)
        return d


def exploit_candidates(trace: PowerTrace, meta: RunMetadata) -> np.ndarray:
    """Window start times at trace resolution: starts or ends on a sample, plus both extremes."""
    m0, m1 = meta.middle_window
    w = meta.level1_window_length
    hi = m1 - w
    tol = _span_tol(trace)
    if w <= 0 or trace.start > meta.run_start_s + tol or trace.end < meta.run_end_s - tol:
        raise ValueError("trace does not cover the run, so no level-1 window fits")
    t = trace.t_s
    starts = np.concatenate(([m0, hi], t[(t >= m0) & (t <= hi)], (t - w)[(t - w >= m0) & (t - w <= hi)]))
    return np.unique(starts)


def find_exploit_window(trace: PowerTrace, meta: RunMetadata) -> ExploitResult:
    """Lowest-power level-1 window inside the middle 80% and the efficiency it would imply."""
    starts = exploit_candidates(trace, meta)
    w = meta.level1_window_length
    integrals = trace.shifted_integral_at(starts + w) - trace.shifted_integral_at(starts)
    best = int(np.argmin(integrals))
    t0 = float(starts[best])
    win_avg = float(trace.watts[0] + integrals[best] / w)
    full_avg = average_power(trace, meta.run_start_s, meta.run_end_s)
    gflops = meta.sustained_gflops
    return ExploitResult(
        window=(t0, t0 + w),
        window_avg_power_w=win_avg,
        full_avg_power_w=full_avg,
        inflated_efficiency=efficiency(gflops, win_avg),
        full_efficiency=efficiency(gflops, full_avg),
        inflation_ratio=full_avg / win_avg,
    )


def _node_channels(traces: Mapping[str, PowerTrace]) -> list[PowerTrace]:
    return [tr for ch, tr in traces.items() if ch not in ("cluster", "network")]


def total_power_trace(traces: Mapping[str, PowerTrace], meta: RunMetadata) -> PowerTrace:
    """Full-system draw: the ``cluster`` channel if present, else extrapolated node channels.

    In the extrapolated case every channel except ``network`` is a measured
    node, scaled up to ``meta.nodes_total``.
    """
    if "cluster" in traces:
        return traces["cluster"]
    nodes = _node_channels(traces)
    if not nodes:
        raise ValueError("trace has neither a cluster channel nor node channels")
    if meta.network_included == "measured":
        if "network" not in traces:
            raise ValueError("metadata says the network was measured but there is no network channel")
        net: PowerTrace | float | None = traces["network"]
    elif meta.network_included == "estimated":
        net = meta.network_estimate_w
    else:
        net = None
    return extrapolate_total_power(nodes, meta.nodes_total, net)


def measure(traces: Mapping[str, PowerTrace], meta: RunMetadata,
            window: tuple[float, float] | None = None) -> MeasurementReport:
    """Build a report from measured channels (see ``total_power_trace``)."""
    total = total_power_trace(traces, meta)
    nodes = _node_channels(traces)
    if window is None:
        window = (max(total.start, meta.run_start_s), min(total.end, meta.run_end_s))
    avg = average_power(total, *window)
    level = classify_level(meta, window)
    if meta.nodes_measured >= meta.nodes_total:
        bound: float | None = 0.0
    elif len(meta.node_efficiencies) >= 2:
        bound = node_variability(meta.node_efficiencies)
    elif len(nodes) >= 2:
        bound = node_variability([average_power(tr, *window) for tr in nodes])
    else:
        bound = None
    return MeasurementReport(level=level, window=(float(window[0]), float(window[1])), avg_power_w=avg,
                             efficiency_mflops_per_w=efficiency(meta.sustained_gflops, avg),
                             extrapolation_error_bound=bound, compliant=level is not None)
