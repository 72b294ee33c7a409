"""``gradsync`` command line: simulate, sweep, perf, gen-workload.

Settings come from an optional JSON config file (``--config``) and are
overridden by flags. Result files start with a header block that records the
full configuration, seed, and package version, and never a wall-clock time,
so identical invocations produce identical bytes.

Exit codes: 0 ok, 2 configuration error, 3 deadlock, 1 anything else.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import tempfile
from dataclasses import asdict, replace
from pathlib import Path

from gradsync import __version__
from gradsync.backends import DEFAULT_ALPHA, DEFAULT_BETA, Algorithm, CostModel, Strategy
from gradsync.errors import ConfigError, DeadlockDetected, GradsyncError
from gradsync.fusion import DEFAULT_FUSION_BUFFER, FusionPolicy, GroupSpec
from gradsync.perfmodel import aggregate, load_layers, load_timings, performance, total_conv_ops
from gradsync.sim import (
    DEFAULT_GROUPS,
    STRATEGIES,
    SWEEP_COLUMNS,
    SimConfig,
    efficiency_sweep,
    emit_timeline,
    run,
    sweep_counts,
)
from gradsync.workload import (
    DEFAULT_TENSOR_COUNT,
    DEFAULT_TOTAL_PARAMS,
    SCHEMA_VERSION,
    JitterSpec,
    generate_workload,
    groups_to_dict,
    load_groups,
    load_workload,
)

log = logging.getLogger("gradsync")

EXIT_OK, EXIT_OTHER, EXIT_CONFIG, EXIT_DEADLOCK = 0, 1, 2, 3
DEFAULT_SWEEP_WORKERS = "1,2,4,...,1024"

# config-file key -> type; flags use the same names with dashes
CONFIG_KEYS = {
    "schema_version": int,
    "workload": str,
    "workers": (int, str),
    "steps": int,
    "seed": int,
    "cycle_time_ms": float,
    "coordinator": str,
    "grouping": str,
    "groups": int,
    "strategies": (str, list),
    "alpha": float,
    "beta": float,
    "algorithm": str,
    "tree_bandwidth_factor": float,
    "fusion_buffer_bytes": int,
    "t_misc_ms": float,
    "warmup_steps": int,
    "cache_capacity": int,
    "record_header_bytes": int,
    "coordinator_record_time_us": float,
    "stall_fraction": float,
    "max_cycles_per_step": int,
    "jitter_kind": str,
    "jitter_scale": float,
    "jobs": int,
}


def _atomic_write(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _emit(text: str, out) -> None:
    if out:
        _atomic_write(out, text)
        log.info("wrote %s", out)
    else:
        sys.stdout.write(text)


def _read_config(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise ConfigError("config", f"file not found: {p}")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError("config", f"{p}: invalid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise ConfigError("config", "top level must be an object")
    if data.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError("schema_version", f"expected {SCHEMA_VERSION}, got {data.get('schema_version')!r}")
    for key, value in data.items():
        if key not in CONFIG_KEYS:
            raise ConfigError(key, "unknown config key")
        expected = CONFIG_KEYS[key]
        ok = isinstance(value, expected) and not isinstance(value, bool)
        if expected is float and isinstance(value, int) and not isinstance(value, bool):
            ok = True
        if not ok:
            raise ConfigError(key, f"wrong type {type(value).__name__}")
    return data


def _settings(args) -> dict:
    """Config file values overlaid with every flag the user actually passed."""
    merged = _read_config(getattr(args, "config", None))
    for key in CONFIG_KEYS:
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value
    return merged


def _enum(cls, value, field):
    try:
        return cls(value)
    except ValueError:
        allowed = ", ".join(m.value for m in cls)
        raise ConfigError(field, f"{value!r} is not one of: {allowed}") from None


def _workload(s: dict):
    wl = load_workload(s["workload"]) if s.get("workload") else generate_workload()
    if "jitter_kind" in s or "jitter_scale" in s:
        kind = s.get("jitter_kind", wl.jitter.kind.value)
        scale = s.get("jitter_scale", wl.jitter.scale)
        try:
            wl = wl.with_jitter(JitterSpec(kind, float(scale)))
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError("jitter_kind", str(exc)) from exc
    return wl


def _groups(s: dict, workload) -> GroupSpec | None:
    if s.get("grouping"):
        spec = load_groups(s["grouping"])
        spec.validate(workload.tensors)
        return spec
    if s.get("groups"):
        return GroupSpec.contiguous(workload.tensors, int(s["groups"]))
    return None


def _sim_config(s: dict, workload, world_size: int) -> SimConfig:
    cost = CostModel(
        alpha=float(s.get("alpha", DEFAULT_ALPHA)),
        beta=float(s.get("beta", DEFAULT_BETA)),
        algorithm=_enum(Algorithm, s.get("algorithm", "tree"), "algorithm"),
        tree_bandwidth_factor=float(s.get("tree_bandwidth_factor", 1.0)),
    )
    buf = int(s.get("fusion_buffer_bytes", DEFAULT_FUSION_BUFFER))
    groups = _groups(s, workload)
    fusion = FusionPolicy.grouped(groups, buf) if groups else FusionPolicy.ungrouped(buf)
    defaults = SimConfig()
    return SimConfig(
        world_size=world_size,
        steps=int(s.get("steps", defaults.steps)),
        cycle_time=float(s.get("cycle_time_ms", defaults.cycle_time * 1e3)) / 1e3,
        coordinator=_enum(Strategy, s.get("coordinator", defaults.coordinator.value), "coordinator"),
        fusion=fusion,
        cost=cost,
        seed=int(s.get("seed", defaults.seed)),
        t_misc=float(s.get("t_misc_ms", 0.0)) / 1e3,
        warmup_steps=int(s.get("warmup_steps", defaults.warmup_steps)),
        cache_capacity=int(s.get("cache_capacity", defaults.cache_capacity)),
        record_header_bytes=int(s.get("record_header_bytes", defaults.record_header_bytes)),
        coordinator_record_time=float(s.get("coordinator_record_time_us", defaults.coordinator_record_time * 1e6)) / 1e6,
        stall_fraction=float(s.get("stall_fraction", defaults.stall_fraction)),
        max_cycles_per_step=int(s.get("max_cycles_per_step", defaults.max_cycles_per_step)),
    )


def _header(config: SimConfig, workload, extra: dict | None = None) -> dict:
    head = {
        "artifact": "gradsync",
        "version": __version__,
        "seed": config.seed,
        "config": config.to_dict(),
        "workload": {
            "profile": workload.profile,
            "seed": workload.seed,
            "tensors": len(workload.tensors),
            "total_bytes": workload.total_bytes,
            "jitter": workload.jitter.to_dict(),
        },
    }
    if extra:
        head.update(extra)
    return head


# -- subcommands -----------------------------------------------------------

def cmd_simulate(args) -> int:
    s = _settings(args)
    workload = _workload(s)
    workers = s.get("workers", 1)
    if isinstance(workers, str):
        counts = sweep_counts(workers)
        if len(counts) != 1:
            raise ConfigError("workers", "simulate takes a single worker count")
        workers = counts[0]
    if int(workers) < 1:
        raise ConfigError("workers", "must be >= 1")
    config = _sim_config(s, workload, int(workers))
    if args.event_log:
        config = replace(config, event_log=True)
    metrics = run(config, workload)
    doc = {
        "header": _header(config, workload),
        "summary": metrics.summary(),
        "steps": [asdict(m) for m in metrics.steps],
    }
    _emit(json.dumps(doc, indent=2, sort_keys=True) + "\n", args.out)
    if args.event_log:
        _atomic_write(args.event_log, emit_timeline(metrics, fmt=args.event_format))
    return EXIT_OK


def _strategies(value) -> list[str]:
    if isinstance(value, list):
        names = value
    elif value in (None, "all"):
        names = list(STRATEGIES)
    else:
        names = [v.strip() for v in value.split(",") if v.strip()]
    for n in names:
        if n not in STRATEGIES:
            raise ConfigError("strategies", f"unknown strategy {n!r}; expected {', '.join(STRATEGIES)} or all")
    return names


def cmd_sweep(args) -> int:
    s = _settings(args)
    workload = _workload(s)
    workers = s.get("workers", DEFAULT_SWEEP_WORKERS)
    counts = sweep_counts(workers if isinstance(workers, str) else str(workers))
    strategies = _strategies(s.get("strategies"))
    base = _sim_config(s, workload, 1)
    groups = _groups(s, workload) or GroupSpec.contiguous(workload.tensors, DEFAULT_GROUPS)
    rows = efficiency_sweep(base, workload, counts, strategies, groups, jobs=int(s.get("jobs", 1)))
    head = _header(base, workload, {"worker_counts": counts, "strategies": strategies, "groups": len(groups.group_members)})
    buf = io.StringIO()
    for line in json.dumps(head, indent=1, sort_keys=True).splitlines():
        buf.write(f"# {line}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SWEEP_COLUMNS)
    for r in rows:
        writer.writerow([r.strategy, r.P, repr(r.throughput_per_s), repr(r.efficiency), repr(r.t_comm_ms_mean), repr(r.t_comp_ms_mean)])
    _emit(buf.getvalue(), args.out)
    return EXIT_OK


def cmd_perf(args) -> int:
    records = load_timings(args.timings, args.column)
    layers = load_layers(args.layers)
    report = performance(total_conv_ops(layers), records)
    lines = report.lines()
    doc = {"header": {"artifact": "gradsync", "version": __version__, "column": args.column}, "per_gpu": report.to_dict()}
    if args.gpus != 1 or args.efficiency != 1.0:
        agg = aggregate(report, args.gpus, args.efficiency)
        lines += [""] + agg.lines()
        doc["aggregate"] = agg.to_dict()
    if args.out:
        _atomic_write(args.out, json.dumps(doc, indent=2, sort_keys=True) + "\n")
    sys.stdout.write("\n".join(lines) + "\n")
    return EXIT_OK


def cmd_gen_workload(args) -> int:
    jitter = None
    if args.jitter_kind is not None or args.jitter_scale is not None:
        jitter = JitterSpec(args.jitter_kind or "uniform", args.jitter_scale if args.jitter_scale is not None else 0.05)
    wl = generate_workload(args.profile, args.total_params, args.tensors, args.seed, args.element_bytes, jitter=jitter)
    _emit(json.dumps(wl.to_dict(), indent=1) + "\n", args.out)
    if args.groups_out:
        spec = GroupSpec.contiguous(wl.tensors, args.groups)
        _atomic_write(args.groups_out, json.dumps(groups_to_dict(spec), indent=1, sort_keys=True) + "\n")
    return EXIT_OK


# -- parser ------------------------------------------------------------------

def _add_sim_options(p: argparse.ArgumentParser, sweep: bool) -> None:
    p.add_argument("--config", help="JSON config file (schema_version 1); flags override it")
    p.add_argument("--workload", help="workload JSON from gen-workload (default: built-in fc-densenet-like)")
    if sweep:
        p.add_argument("--workers", help=f"worker counts, e.g. {DEFAULT_SWEEP_WORKERS!r}")
        p.add_argument("--strategies", help="'all' or a comma list of: " + ", ".join(STRATEGIES))
        p.add_argument("--jobs", type=int, help="parallel simulation processes")
    else:
        p.add_argument("--workers", type=int, help="world size P")
        p.add_argument("--coordinator", choices=[s.value for s in Strategy])
        p.add_argument("--event-log", help="write the event log here")
        p.add_argument("--event-format", choices=["csv", "jsonl"], default="csv")
    p.add_argument("--grouping", help="group file (tensor name -> group id); enables grouped fusion")
    p.add_argument("--groups", type=int, help="contiguous equal-byte groups when no group file is given")
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--cycle-time-ms", dest="cycle_time_ms", type=float)
    p.add_argument("--alpha", type=float, help="per-hop latency, seconds")
    p.add_argument("--beta", type=float, help="seconds per byte")
    p.add_argument("--algorithm", choices=[a.value for a in Algorithm])
    p.add_argument("--fusion-buffer-bytes", dest="fusion_buffer_bytes", type=int)
    p.add_argument("--t-misc-ms", dest="t_misc_ms", type=float)
    p.add_argument("--stall-fraction", dest="stall_fraction", type=float)
    p.add_argument("--record-time-us", dest="coordinator_record_time_us", type=float)
    p.add_argument("--jitter-kind", dest="jitter_kind", choices=["none", "uniform", "normal"])
    p.add_argument("--jitter-scale", dest="jitter_scale", type=float)
    p.add_argument("--out", help="result file (default: stdout)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gradsync", description="Gradient-reduction coordination simulator")
    parser.add_argument("--version", action="version", version=f"gradsync {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run one simulation, write JSON metrics")
    _add_sim_options(p, sweep=False)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("sweep", help="scaling-efficiency sweep over P and strategies, write CSV")
    _add_sim_options(p, sweep=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("perf", help="sustained and peak FLOPS from a timing table")
    p.add_argument("--timings", help="timing table JSON (default: bundled table)")
    p.add_argument("--layers", help="conv layer JSON (default: bundled fitted layers)")
    p.add_argument("--column", choices=["tc", "no_tc"], default="tc")
    p.add_argument("--gpus", type=int, default=1)
    p.add_argument("--efficiency", type=float, default=1.0)
    p.add_argument("--out", help="also write the report as JSON")
    p.set_defaults(func=cmd_perf)

    p = sub.add_parser("gen-workload", help="write a synthetic workload file")
    p.add_argument("--profile", choices=["fc-densenet-like", "uniform"], default="fc-densenet-like")
    p.add_argument("--total-params", dest="total_params", type=int, default=DEFAULT_TOTAL_PARAMS)
    p.add_argument("--tensors", type=int, default=DEFAULT_TENSOR_COUNT)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--element-bytes", dest="element_bytes", type=int, default=2)
    p.add_argument("--jitter-kind", dest="jitter_kind", choices=["none", "uniform", "normal"])
    p.add_argument("--jitter-scale", dest="jitter_scale", type=float)
    p.add_argument("--groups", type=int, default=DEFAULT_GROUPS, help="group count for --groups-out")
    p.add_argument("--groups-out", dest="groups_out", help="also write a contiguous group file")
    p.add_argument("--out", help="workload file (default: stdout)")
    p.set_defaults(func=cmd_gen_workload)
    return parser


def main(argv=None) -> int:
    level = os.environ.get("GRADSYNC_LOG", "WARNING").upper()
    logging.basicConfig(
        level=level if isinstance(logging.getLevelName(level), int) else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"gradsync: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DeadlockDetected as exc:
        print(f"gradsync: deadlock: {exc}", file=sys.stderr)
        return EXIT_DEADLOCK
    except (GradsyncError, OSError, ValueError) as exc:
        print(f"gradsync: error: {exc}", file=sys.stderr)
        return EXIT_OTHER


if __name__ == "__main__":
    sys.exit(main())
