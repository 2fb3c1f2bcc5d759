"""Operating-point search maximizing simulated cluster MFLOPS/W.

Two strategies share one objective: an exhaustive scan (ground truth at
desk scale) and cyclic coordinate descent. Both pick winners with the same
total order, so results do not depend on evaluation order or fan-out.
"""

from __future__ import annotations

import csv
import itertools
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Any, Mapping, Sequence

import numpy as np

from .catalog import ClusterSpec, ConfigError
from .power import FanCurve, OperatingPoint, is_feasible
from .workload import LoadProfile, SimParams, TraceCache, per_node_spread, run_hpl

AXES = ("gpu_clock_mhz", "voltage_offset_v", "fan_duty", "cpu_clock_ghz")


def _grid(spec: Any) -> tuple:
    if isinstance(spec, Mapping):
        n = int(round((spec["stop"] - spec["start"]) / spec["step"])) + 1
        return tuple(round(spec["start"] + i * spec["step"], 9) for i in range(n))
    return tuple(spec)


@dataclass(frozen=True)
class SearchSpace:
    freq_steps: tuple[float, ...]
    voltage_offsets: tuple[float, ...]
    fan_duties: tuple[float, ...]
    cpu_clocks: tuple[float | None, ...] = (None,)

    def __post_init__(self) -> None:
        for name in ("freq_steps", "voltage_offsets", "fan_duties", "cpu_clocks"):
            values = tuple(getattr(self, name))
            if not values:
                raise ConfigError(f"search_space.{name} is empty")
            object.__setattr__(self, name, values)
        if any(not 0.2 <= d <= 1.0 for d in self.fan_duties):
            raise ConfigError("search_space.fan_duties must lie in [0.2, 1.0]")

    @property
    def size(self) -> int:
        return len(self.freq_steps) * len(self.voltage_offsets) * len(self.fan_duties) * len(self.cpu_clocks)

    def axis(self, name: str) -> tuple:
        return {"gpu_clock_mhz": self.freq_steps, "voltage_offset_v": self.voltage_offsets,
                "fan_duty": self.fan_duties, "cpu_clock_ghz": self.cpu_clocks}[name]

    def points(self):
        for f, v, d, c in itertools.product(self.freq_steps, self.voltage_offsets,
                                            self.fan_duties, self.cpu_clocks):
            yield make_point(f, v, d, c)

    def to_dict(self) -> dict[str, Any]:
        return {"freq_steps": list(self.freq_steps), "voltage_offsets": list(self.voltage_offsets),
                "fan_duties": list(self.fan_duties), "cpu_clocks": list(self.cpu_clocks)}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> SearchSpace:
        try:
            return cls(freq_steps=_grid(data["freq_steps"]), voltage_offsets=_grid(data["voltage_offsets"]),
                       fan_duties=_grid(data["fan_duties"]), cpu_clocks=_grid(data.get("cpu_clocks", [None])))
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"search_space: {exc}") from None


def make_point(freq: float, offset: float, duty: float, cpu: float | None) -> OperatingPoint:
    return OperatingPoint(gpu_clock_mhz=float(freq), voltage_offset_v=float(offset),
                          fan_curve=FanCurve.constant(float(duty)),
                          cpu_clock_ghz=None if cpu is None else float(cpu))


def point_coords(point: OperatingPoint) -> dict[str, Any]:
    return {"gpu_clock_mhz": point.gpu_clock_mhz, "voltage_offset_v": point.voltage_offset_v,
            "fan_duty": point.fan_curve.max_duty, "cpu_clock_ghz": point.cpu_clock_ghz}


@dataclass
class Evaluation:
    point: OperatingPoint
    feasible: bool
    mflops_per_w: float = -math.inf
    gflops: float = 0.0
    mean_power_w: float = 0.0
    perf_spread: float = 0.0
    throttle_events: int = 0

    def sort_key(self) -> tuple:
        # best first: objective, then lower voltage, fan duty, GPU clock, CPU clock
        c = point_coords(self.point)
        cpu = -math.inf if c["cpu_clock_ghz"] is None else c["cpu_clock_ghz"]
        return (-self.mflops_per_w, c["voltage_offset_v"], c["fan_duty"], c["gpu_clock_mhz"], cpu)


@dataclass
class TuneResult:
    best_point: OperatingPoint
    objective_mflops_per_w: float
    evaluations: int
    per_node_perf_spread: float
    throttle_events: int
    method: str = "exhaustive"
    history: list[Evaluation] = field(default_factory=list, repr=False)

    def to_dict(self) -> dict[str, Any]:
        return {"method": self.method, "best_point": self.best_point.to_dict(),
                "objective_mflops_per_w": self.objective_mflops_per_w, "evaluations": self.evaluations,
                "per_node_perf_spread": self.per_node_perf_spread, "throttle_events": self.throttle_events}

    def write_evaluations_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([*AXES, "feasible", "mflops_per_w", "gflops", "mean_power_w",
                        "perf_spread", "throttle_events"])
            for ev in self.history:
                c = point_coords(ev.point)
                w.writerow([*(("" if c[a] is None else repr(c[a])) for a in AXES), int(ev.feasible),
                            repr(ev.mflops_per_w) if ev.feasible else "", repr(ev.gflops),
                            repr(ev.mean_power_w), repr(ev.perf_spread), ev.throttle_events])


def evaluate(cluster: ClusterSpec, point: OperatingPoint, params: SimParams,
             profile: LoadProfile) -> Evaluation:
    """Simulate one HPL run; points below any chip's stable voltage come back infeasible."""
    boards = {(g, vid) for node in cluster.nodes for g, vid in node.gpus}
    if not is_feasible(sorted(boards, key=lambda b: (b[0].name, b[1])), point, params.governor):
        return Evaluation(point, feasible=False)
    run = run_hpl(cluster, point, params, profile, cache=TraceCache())
    return Evaluation(point, feasible=True, mflops_per_w=run.mflops_per_w, gflops=run.gflops,
                      mean_power_w=run.mean_power_w, perf_spread=per_node_spread(run.node_perfs),
                      throttle_events=run.throttle_events)


def _evaluate_args(args) -> Evaluation:
    return evaluate(*args)


def _pick(evals: Sequence[Evaluation]) -> Evaluation | None:
    feasible = [e for e in evals if e.feasible]
    return min(feasible, key=Evaluation.sort_key) if feasible else None


def _result(best: Evaluation, evals: list[Evaluation], method: str) -> TuneResult:
    return TuneResult(best_point=best.point, objective_mflops_per_w=best.mflops_per_w,
                      evaluations=sum(e.feasible for e in evals), per_node_perf_spread=best.perf_spread,
                      throttle_events=best.throttle_events, method=method, history=evals)


def tune_exhaustive(cluster: ClusterSpec, space: SearchSpace, params: SimParams, profile: LoadProfile,
                    max_points: int = 10_000, workers: int = 1) -> TuneResult:
    if space.size > max_points:
        raise ConfigError(f"search space has {space.size} points, cap is {max_points}")
    points = list(space.points())
    jobs = [(cluster, p, params, profile) for p in points]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            evals = list(pool.map(_evaluate_args, jobs, chunksize=8))
    else:
        evals = [_evaluate_args(j) for j in jobs]
    best = _pick(evals)
    if best is None:
        raise ConfigError("every point in the search space is infeasible")
    return _result(best, evals, "exhaustive")


def tune_coordinate(cluster: ClusterSpec, space: SearchSpace, params: SimParams, profile: LoadProfile,
                    start: OperatingPoint, seed: int = 0, max_sweeps: int = 50) -> TuneResult:
    """Cyclic coordinate descent; the seed fixes the axis visiting order."""
    coords = point_coords(start)
    for axis in AXES:
        match = [v for v in space.axis(axis) if _same(coords[axis], v)]
        if not match:
            raise ConfigError(f"start point {axis}={coords[axis]} is not in the search space")
        coords[axis] = match[0]
    order = [AXES[i] for i in np.random.default_rng(seed).permutation(len(AXES))]
    seen: dict[tuple, Evaluation] = {}

    def ev(c: Mapping[str, Any]) -> Evaluation:
        key = tuple(c[a] for a in AXES)
        if key not in seen:
            seen[key] = evaluate(cluster, make_point(*key), params, profile)
        return seen[key]

    current = ev(coords)
    for _ in range(max_sweeps):
        moved = False
        for axis in order:
            options = [ev({**coords, axis: v}) for v in space.axis(axis)]
            best = _pick(options + [current])
            if best is not None and best is not current:
                current = best
                coords = point_coords(best.point)
                moved = True
        if not moved:
            break
    if not current.feasible:
        raise ConfigError("coordinate descent found no feasible point")
    return _result(current, list(seen.values()), "coordinate")


def _same(a, b) -> bool:
    if a is None or b is None:
        return a is b
    return abs(a - b) < 1e-12


def with_vids_shifted(cluster: ClusterSpec, bins: int = 1) -> ClusterSpec:
    """Copy of ``cluster`` with every board's VID moved up ``bins`` table entries."""
    nodes = tuple(node.with_vids([g.vid_step_up(v, bins) for g, v in node.gpus]) for node in cluster.nodes)
    return replace(cluster, nodes=nodes)
