"""Hardware catalog: GPU, CPU, node and cluster descriptions.

Presets live in ``data/catalog.json``. Cluster description files reference
catalog entries by name and may override individual node fields. Setting the
``GREENSIM_CATALOG`` environment variable points the loader at a different
catalog file.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

CATALOG_ENV = "GREENSIM_CATALOG"
VID_MIN_V = 1.0
VID_MAX_V = 1.3


class ConfigError(ValueError):
    """Raised for invalid catalog, cluster or settings content."""


def _positive(name: str, value: float) -> None:
    if not value > 0:
        raise ConfigError(f"{name} must be > 0, got {value!r}")


@dataclass(frozen=True)
class GpuSpec:
    """One accelerator board. Rates and sizes are per chip unless noted."""

    name: str
    chips_per_board: int
    stream_processors_per_chip: int
    fp64_rate: float
    base_clock_mhz: float
    memory_per_chip_gb: float
    bandwidth_per_chip_gbs: float
    tdp_w: float
    vid_table: tuple[float, ...]

    def __post_init__(self) -> None:
        for attr in ("chips_per_board", "stream_processors_per_chip", "base_clock_mhz",
                     "memory_per_chip_gb", "bandwidth_per_chip_gbs", "tdp_w"):
            _positive(f"{self.name}.{attr}", getattr(self, attr))
        if not 0 < self.fp64_rate <= 1:
            raise ConfigError(f"{self.name}.fp64_rate must lie in (0, 1], got {self.fp64_rate}")
        vids = tuple(float(v) for v in self.vid_table)
        if not vids:
            raise ConfigError(f"{self.name}.vid_table is empty")
        if any(b <= a for a, b in zip(vids, vids[1:])):
            raise ConfigError(f"{self.name}.vid_table must be sorted ascending")
        if vids[0] < VID_MIN_V or vids[-1] > VID_MAX_V:
            raise ConfigError(f"{self.name}.vid_table values must lie in [{VID_MIN_V}, {VID_MAX_V}] V")
        object.__setattr__(self, "vid_table", vids)

    def has_vid(self, vid: float) -> bool:
        return any(abs(vid - v) < 1e-9 for v in self.vid_table)

    def vid_step_up(self, vid: float, steps: int = 1) -> float:
        """The table entry ``steps`` bins above ``vid`` (clamped at the top)."""
        idx = min(range(len(self.vid_table)), key=lambda i: abs(self.vid_table[i] - vid))
        return self.vid_table[min(idx + steps, len(self.vid_table) - 1)]


@dataclass(frozen=True)
class CpuSpec:
    name: str
    cores: int
    clock_ghz: float
    flops_per_cycle_per_core: int
    threads_per_core: int = 1

    def __post_init__(self) -> None:
        for attr in ("cores", "clock_ghz", "flops_per_cycle_per_core", "threads_per_core"):
            _positive(f"{self.name}.{attr}", getattr(self, attr))


@dataclass(frozen=True)
class NodeSpec:
    """A compute node. ``gpus`` holds one ``(GpuSpec, vid)`` pair per board."""

    cpus: tuple[CpuSpec, ...]
    gpus: tuple[tuple[GpuSpec, float], ...]
    system_memory_gb: float
    static_power_w: float = 0.0
    usb_power_w: float = 20.0
    usb_suspended: bool = False
    disks_disabled: bool = False
    disk_power_w: float = 0.0
    name: str = "node"

    def __post_init__(self) -> None:
        object.__setattr__(self, "cpus", tuple(self.cpus))
        object.__setattr__(self, "gpus", tuple((g, float(v)) for g, v in self.gpus))
        for gpu, vid in self.gpus:
            if not gpu.has_vid(vid):
                raise ConfigError(f"{self.name}: VID {vid} V is not in the {gpu.name} VID table")
        if self.system_memory_gb < 0 or self.static_power_w < 0 or self.disk_power_w < 0:
            raise ConfigError(f"{self.name}: memory and power figures must be >= 0")
        if not 0 <= self.usb_power_w <= 20.0:
            raise ConfigError(f"{self.name}.usb_power_w must lie in [0, 20] W")

    @property
    def gpu_chips(self) -> int:
        return sum(g.chips_per_board for g, _ in self.gpus)

    @property
    def cpu_cores(self) -> int:
        return sum(c.cores for c in self.cpus)

    @property
    def cpu_threads(self) -> int:
        return sum(c.cores * c.threads_per_core for c in self.cpus)

    @property
    def stream_processors(self) -> int:
        return sum(g.chips_per_board * g.stream_processors_per_chip for g, _ in self.gpus)

    @property
    def gpu_memory_gb(self) -> float:
        return sum(g.chips_per_board * g.memory_per_chip_gb for g, _ in self.gpus)

    def with_vids(self, vids: Sequence[float]) -> NodeSpec:
        if len(vids) != len(self.gpus):
            raise ConfigError(f"{self.name}: expected {len(self.gpus)} VIDs, got {len(vids)}")
        return replace(self, gpus=tuple((g, v) for (g, _), v in zip(self.gpus, vids)))


@dataclass(frozen=True)
class ClusterSpec:
    nodes: tuple[NodeSpec, ...]
    switch_count: int = 0
    switch_power_w: float = 0.0
    name: str = "cluster"

    def __post_init__(self) -> None:
        object.__setattr__(self, "nodes", tuple(self.nodes))
        if not self.nodes:
            raise ConfigError(f"{self.name}: node list is empty")
        if self.switch_power_w < 0 or self.switch_count < 0:
            raise ConfigError(f"{self.name}: switch figures must be >= 0")

    def board_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for node in self.nodes:
            for gpu, _ in node.gpus:
                counts[gpu.name] = counts.get(gpu.name, 0) + 1
        return counts


# -- derived peak metrics ---------------------------------------------------

def gpu_peak_flops(spec: GpuSpec, clock_mhz: float) -> float:
    """fp64 peak of one board in GFLOPS (2 ops per SP per cycle for FMA)."""
    if not clock_mhz > 0:
        raise ValueError(f"clock_mhz must be > 0, got {clock_mhz}")
    return spec.chips_per_board * spec.stream_processors_per_chip * clock_mhz * 1e-3 * 2 * spec.fp64_rate


def cpu_peak_flops(cpu: CpuSpec, clock_ghz: float | None = None) -> float:
    clock = cpu.clock_ghz if clock_ghz is None else clock_ghz
    return cpu.cores * clock * cpu.flops_per_cycle_per_core


def node_peak_flops(node: NodeSpec) -> float:
    gpus = sum(gpu_peak_flops(g, g.base_clock_mhz) for g, _ in node.gpus)
    return gpus + sum(cpu_peak_flops(c) for c in node.cpus)


def node_aggregate_bandwidth(node: NodeSpec) -> float:
    return sum(g.chips_per_board * g.bandwidth_per_chip_gbs for g, _ in node.gpus)


def cluster_peak_flops(cluster: ClusterSpec) -> float:
    return sum(node_peak_flops(n) for n in cluster.nodes)


# -- catalog loading --------------------------------------------------------

def default_catalog_path() -> Path:
    override = os.environ.get(CATALOG_ENV)
    if override:
        return Path(override)
    return Path(str(resources.files("greensim") / "data" / "catalog.json"))


def _build(cls, where: str, data: Mapping[str, Any], **extra):
    try:
        return cls(**{**data, **extra})
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _vid_table(entry: Mapping[str, Any]) -> list[float]:
    table = entry.get("vid_table")
    if isinstance(table, Mapping):
        # {"start": a, "stop": b, "step": s} expands to an inclusive grid
        n = int(round((table["stop"] - table["start"]) / table["step"])) + 1
        return [round(table["start"] + i * table["step"], 6) for i in range(n)]
    return list(table or [])


@dataclass
class Catalog:
    gpus: dict[str, GpuSpec]
    cpus: dict[str, CpuSpec]
    nodes: dict[str, NodeSpec]
    clusters: dict[str, dict[str, Any]] = field(default_factory=dict)
    version: int = 1

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> Catalog:
        gpus = {}
        for name, entry in data.get("gpus", {}).items():
            entry = {k: v for k, v in entry.items() if not k.startswith("_")}
            entry["vid_table"] = _vid_table(entry)
            gpus[name] = _build(GpuSpec, f"gpus.{name}", entry, name=name)
        cpus = {name: _build(CpuSpec, f"cpus.{name}", {k: v for k, v in e.items() if not k.startswith("_")}, name=name)
                for name, e in data.get("cpus", {}).items()}
        nodes = {}
        for name, entry in data.get("nodes", {}).items():
            nodes[name] = _node_from_entry(f"nodes.{name}", entry, gpus, cpus, name=name)
        return cls(gpus=gpus, cpus=cpus, nodes=nodes,
                   clusters=dict(data.get("clusters", {})), version=int(data.get("version", 1)))

    @classmethod
    def load(cls, path: str | os.PathLike | None = None) -> Catalog:
        path = Path(path) if path is not None else default_catalog_path()
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"catalog file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(data)

    def cluster(self, name: str, seed: int = 0) -> ClusterSpec:
        if name not in self.clusters:
            raise ConfigError(f"unknown cluster preset {name!r}")
        return build_cluster(self.clusters[name], self, seed=seed, name=name)


def _node_from_entry(where: str, entry: Mapping[str, Any], gpus: Mapping[str, GpuSpec],
                     cpus: Mapping[str, CpuSpec], name: str) -> NodeSpec:
    try:
        cpu_list = tuple(cpus[c] for c in entry["cpus"])
        boards = [gpus[g] for g in entry.get("gpus", [])]
    except KeyError as exc:
        raise ConfigError(f"{where}: unknown catalog reference {exc}") from None
    vids = entry.get("gpu_vids")
    if vids is None:
        vids = [b.vid_table[0] for b in boards]
    elif not isinstance(vids, list):
        vids = [vids] * len(boards)
    if len(vids) != len(boards):
        raise ConfigError(f"{where}.gpu_vids: expected {len(boards)} values, got {len(vids)}")
    fields = {k: v for k, v in entry.items() if k not in ("cpus", "gpus", "gpu_vids") and not k.startswith("_")}
    try:
        return NodeSpec(cpus=cpu_list, gpus=tuple(zip(boards, vids)), name=name, **fields)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def build_cluster(desc: Mapping[str, Any], catalog: Catalog, seed: int = 0,
                  name: str | None = None) -> ClusterSpec:
    """Compose a cluster from node groups referencing catalog node templates.

    Each group is ``{"node": <template>, "count": n, ...overrides}``. A group
    may pin ``gpu_vids`` (scalar or per-board list) or request seeded sampling
    with ``"vid_sampling": {"values": [...], "weights": [...]}``; sampled
    nodes get four identical VIDs, mirroring how boards were sorted into nodes.
    """
    rng = np.random.default_rng(seed)
    nodes: list[NodeSpec] = []
    groups = desc.get("node_groups")
    if not groups:
        raise ConfigError(f"{name or 'cluster'}.node_groups: must be a non-empty list")
    for i, group in enumerate(groups):
        where = f"node_groups[{i}]"
        template_name = group.get("node")
        if template_name not in catalog.nodes:
            raise ConfigError(f"{where}.node: unknown node template {template_name!r}")
        template = catalog.nodes[template_name]
        count = group.get("count", 1)
        if not isinstance(count, int) or count < 1:
            raise ConfigError(f"{where}.count: must be a positive integer")
        overrides = {k: v for k, v in group.items()
                     if k not in ("node", "count", "gpu_vids", "vid_sampling") and not k.startswith("_")}
        try:
            base = replace(template, **overrides) if overrides else template
        except TypeError as exc:
            raise ConfigError(f"{where}: {exc}") from None
        sampling = group.get("vid_sampling")
        for _ in range(count):
            if sampling is not None:
                values = sampling["values"]
                weights = np.asarray(sampling.get("weights", [1.0] * len(values)), dtype=float)
                vid = float(values[rng.choice(len(values), p=weights / weights.sum())])
                node = base.with_vids([vid] * len(base.gpus))
            elif "gpu_vids" in group:
                vids = group["gpu_vids"]
                node = base.with_vids(vids if isinstance(vids, list) else [vids] * len(base.gpus))
            else:
                node = base
            nodes.append(node)
    return ClusterSpec(nodes=tuple(nodes), switch_count=int(desc.get("switch_count", 0)),
                       switch_power_w=float(desc.get("switch_power_w", 0.0)),
                       name=name or desc.get("name", "cluster"))


def load_cluster(path_or_name: str | os.PathLike, catalog: Catalog | None = None,
                 seed: int = 0) -> ClusterSpec:
    """Load a cluster description file, or a preset name from the catalog."""
    catalog = catalog or Catalog.load()
    path = Path(path_or_name)
    if not path.suffix and str(path_or_name) in catalog.clusters:
        return catalog.cluster(str(path_or_name), seed=seed)
    try:
        desc = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"cluster file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return build_cluster(desc, catalog, seed=seed, name=desc.get("name", path.stem))

