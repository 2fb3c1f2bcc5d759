"""Cluster power-efficiency simulator and Green500 measurement harness."""

from __future__ import annotations

from .catalog import (Catalog, ClusterSpec, ConfigError, CpuSpec, GpuSpec, NodeSpec, cpu_peak_flops,
                      gpu_peak_flops, load_cluster, node_aggregate_bandwidth, node_peak_flops)
from .green500 import (MeasurementReport, PowerTrace, RunMetadata, TraceFormatError, average_power,
                       classify_level, efficiency, extrapolate_total_power, find_exploit_window,
                       load_trace, load_traces, measure, node_variability, write_traces)
from .power import (FanCurve, GovernorParams, OperatingPoint, PowerModelParams, SimTrace, fan_power,
                    gpu_power, min_stable_voltage, server_power, simulate_governor, step_thermal)
from .settings import Settings, load_settings
from .tuner import SearchSpace, TuneResult, evaluate, tune_coordinate, tune_exhaustive
from .workload import (LoadProfile, PerfModelParams, Phase, SimParams, dgemm_perf, dslash_perf,
                       hpl_cluster_perf, hpl_node_perf, run_hpl)

__version__ = "0.1.0"
