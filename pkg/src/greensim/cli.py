"""``greensim`` command line: simulate, measure, exploit, tune, report.

Exit codes: 0 success (or compliant measurement), 1 input error,
2 non-compliant measurement.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Any, Mapping

from .catalog import Catalog, ConfigError, load_cluster
from .green500 import (PowerTrace, RunMetadata, TraceFormatError, find_exploit_window, load_traces,
                       measure, total_power_trace, write_traces)
from .settings import load_settings
from .tuner import tune_coordinate, tune_exhaustive
from .workload import per_node_spread, run_hpl

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_NONCOMPLIANT = 2


class InputError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # usage errors are input errors; exit code 2 is reserved for measurements
    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


def write_json(path: Path, data: Mapping[str, Any]) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True, allow_nan=False) + "\n", encoding="utf-8")


def read_json(path: str | Path) -> dict[str, Any]:
    path = Path(path)
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise InputError(f"file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON ({exc})") from None


def _output_dir(args) -> Path:
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _model(args):
    catalog = Catalog.load(args.catalog)
    cluster = load_cluster(args.cluster, catalog, seed=args.seed)
    settings = load_settings(args.settings)
    return cluster, settings


def _load_run(args):
    try:
        meta = RunMetadata.from_dict(read_json(args.meta))
    except ValueError as exc:
        raise InputError(f"{args.meta}: {exc}") from None
    return load_traces(args.trace), meta


# -- subcommands ------------------------------------------------------------

def cmd_simulate(args) -> int:
    cluster, settings = _model(args)
    op = settings.operating_point(args.point)
    run = run_hpl(cluster, op, settings.sim, settings.profile, keep_node_traces=args.node_traces)
    out = _output_dir(args)
    t = run.trace.t_s
    network = PowerTrace(t, [cluster.switch_power_w] * len(t), "network")
    write_traces(out / "trace.csv", [run.trace, network, *run.node_traces.values()])
    summary = {
        "cluster": cluster.name,
        "nodes": len(cluster.nodes),
        "seed": args.seed,
        "operating_point": op.to_dict(),
        "duration_s": settings.profile.total_duration_s,
        "gflops": run.gflops,
        "mean_power_w": run.mean_power_w,
        "mflops_per_w": run.mflops_per_w,
        "energy_j": run.energy_j,
        "throttle_events": run.throttle_events,
        "per_node_perf_spread": per_node_spread(run.node_perfs),
    }
    write_json(out / "summary.json", summary)
    meta = RunMetadata(run_start_s=float(t[0]), run_end_s=float(t[-1]), nodes_total=len(cluster.nodes),
                       nodes_measured=len(cluster.nodes), network_included="measured", gflops=run.gflops)
    write_json(out / "meta.json", meta.to_dict())
    print(f"{cluster.name}: {run.gflops:.1f} GFLOPS, {run.mean_power_w:.1f} W, "
          f"{run.mflops_per_w:.1f} MFLOPS/W -> {out}")
    return EXIT_OK


def cmd_measure(args) -> int:
    traces, meta = _load_run(args)
    report = measure(traces, meta, tuple(args.window) if args.window else None)
    out = _output_dir(args)
    write_json(out / "report.json", report.to_dict())
    level = f"level {report.level}" if report.compliant else "non-compliant"
    print(f"{level}: {report.avg_power_w:.1f} W, {report.efficiency_mflops_per_w:.1f} MFLOPS/W")
    return EXIT_OK if report.compliant else EXIT_NONCOMPLIANT


def cmd_exploit(args) -> int:
    traces, meta = _load_run(args)
    result = find_exploit_window(total_power_trace(traces, meta), meta)
    out = _output_dir(args)
    write_json(out / "exploit-report.json", result.to_dict())
    t0, t1 = result.window
    print(f"window [{t0:.1f}, {t1:.1f}] s: {result.inflated_efficiency:.1f} vs "
          f"{result.full_efficiency:.1f} MFLOPS/W (x{result.inflation_ratio:.4f})")
    return EXIT_OK


def cmd_tune(args) -> int:
    cluster, settings = _model(args)
    cap = args.max_points if args.max_points is not None else settings.max_points
    if args.method == "exhaustive":
        result = tune_exhaustive(cluster, settings.search_space, settings.sim, settings.profile,
                                 max_points=cap, workers=args.workers)
    else:
        start = settings.operating_point(args.start)
        result = tune_coordinate(cluster, settings.search_space, settings.sim, settings.profile,
                                 start=start, seed=args.seed)
    out = _output_dir(args)
    data = result.to_dict()
    data["seed"] = args.seed
    data["cluster"] = cluster.name
    write_json(out / "tune-result.json", data)
    if args.evaluations:
        result.write_evaluations_csv(out / "evaluations.csv")
    bp = result.best_point
    print(f"{args.method}: {bp.gpu_clock_mhz:g} MHz, offset {bp.voltage_offset_v:+.5f} V, "
          f"fan {bp.fan_curve.max_duty:.2f} -> {result.objective_mflops_per_w:.1f} MFLOPS/W "
          f"({result.evaluations} evaluations)")
    return EXIT_OK


def _fmt(value: Any) -> str:
    if isinstance(value, float):
        return f"{value:.6g}"
    if isinstance(value, list):
        return "[" + ", ".join(_fmt(v) for v in value) + "]"
    if isinstance(value, dict):
        return ", ".join(f"{k}={_fmt(v)}" for k, v in value.items())
    return "-" if value is None else str(value)


def _kind(data: Mapping[str, Any]) -> str:
    if "best_point" in data:
        return "Tuning result"
    if "inflation_ratio" in data:
        return "Level-1 exploit"
    if "level" in data and "compliant" in data:
        return "Measurement report"
    if "mflops_per_w" in data:
        return "Simulation summary"
    return "Report"


def render_markdown(data: Mapping[str, Any], title: str | None = None) -> str:
    lines = [f"# {title or _kind(data)}", "", "| field | value |", "|---|---|"]
    for key in sorted(data):
        value = data[key]
        if isinstance(value, dict) and key in ("best_point", "operating_point"):
            for sub in sorted(value):
                lines.append(f"| {key}.{sub} | {_fmt(value[sub])} |")
        else:
            lines.append(f"| {key} | {_fmt(value)} |")
    return "\n".join(lines) + "\n"


def cmd_report(args) -> int:
    data = read_json(args.input)
    if not isinstance(data, dict):
        raise InputError(f"{args.input}: expected a JSON object")
    text = render_markdown(data, args.title)
    if args.output:
        Path(args.output).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


# -- argument parsing -------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--output-dir", default=".", help="directory for output files (default: .)")
    common.add_argument("--seed", type=int, default=0, help="seed for every random choice (default: 0)")

    model = argparse.ArgumentParser(add_help=False)
    model.add_argument("--cluster", default="lcsc-green500",
                       help="cluster description JSON or catalog preset name (default: lcsc-green500)")
    model.add_argument("--settings", default=None,
                       help="settings JSON overlaid on the shipped defaults")
    model.add_argument("--catalog", default=None,
                       help="hardware catalog JSON (default: $GREENSIM_CATALOG or the shipped one)")

    run = argparse.ArgumentParser(add_help=False)
    run.add_argument("--trace", required=True, help="power trace CSV (t_s,watts,channel)")
    run.add_argument("--meta", required=True, help="run metadata JSON")

    parser = _Parser(prog="greensim", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", parents=[common, model], help="simulate an HPL run")
    p.add_argument("--point", default="tuned", help="named operating point from settings (default: tuned)")
    p.add_argument("--node-traces", action="store_true", help="also write one channel per node")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("measure", parents=[common, run], help="apply the Green500 level rules")
    p.add_argument("--window", type=float, nargs=2, metavar=("T0", "T1"),
                   help="measurement window in seconds (default: full run)")
    p.set_defaults(func=cmd_measure)

    p = sub.add_parser("exploit", parents=[common, run], help="find the lowest-power level-1 window")
    p.set_defaults(func=cmd_exploit)

    p = sub.add_parser("tune", parents=[common, model], help="search operating points")
    p.add_argument("--method", choices=("exhaustive", "coordinate"), default="exhaustive")
    p.add_argument("--start", default="stock", help="start point for coordinate descent (default: stock)")
    p.add_argument("--workers", type=int, default=1, help="processes for the exhaustive scan")
    p.add_argument("--max-points", type=int, default=None, help="cap on the search space size")
    p.add_argument("--evaluations", action="store_true", help="also write evaluations.csv")
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("report", help="render a JSON report as markdown")
    p.add_argument("--input", required=True, help="JSON report to render")
    p.add_argument("--output", default=None, help="markdown file (default: stdout)")
    p.add_argument("--title", default=None)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (InputError, ConfigError, TraceFormatError, ValueError, OSError) as exc:
        print(f"greensim {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
