"""Deterministic discrete-event simulation of P data-parallel workers.

Each step, every worker runs a forward pass and then produces gradient
tensors in backprop order at jittered times. A background coordination loop
ticks every ``cycle_time``: it surfaces newly ready tensors, runs the chosen
coordinator, fuses the agreed responses, and executes the fused collectives
one after another. The loop sleeps for the rest of the tick, or starts the
next cycle immediately if the work overran it. A step ends when the last
collective finishes; the next one starts after ``t_misc``.

Collectives overlap compute, except for their latency-bound phase:
``stall_fraction`` of each collective's alpha term stalls every worker that
still has compute left. That is what makes many small messages cost more
than a few large ones.

Time is kept in integer nanoseconds so runs are bit-for-bit reproducible.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import NamedTuple, Sequence

import numpy as np

from gradsync.backends import (
    CostModel,
    Strategy,
    collective_cost,
    latency_term,
    master_worker_cost,
    reduce_oracle,
)
from gradsync.bitvector import DEFAULT_CAPACITY, Path, ResponseCache, WorkerState, coordinate_cycle
from gradsync.errors import ConfigError, DeadlockDetected
from gradsync.fusion import FusionPolicy, Fuser, GroupSpec
from gradsync.master_worker import CoordinatorState, MessageCounter
from gradsync.protocol import CollectiveKind, Request, request_key
from gradsync.workload import WorkloadGraph

log = logging.getLogger(__name__)

NS = 1_000_000_000
DEFAULT_GROUPS = 10
# coordinator CPU time per gathered request record (calibration knob)
DEFAULT_RECORD_TIME = 10e-6
REPLICATE_MAX_P = 64

CYCLE_MARK = "CYCLE_MARK"
TENSOR_READY = "TENSOR_READY"
COORD_FAST = "COORD_FAST"
COORD_FALLBACK = "COORD_FALLBACK"
BATCH_EXEC = "BATCH_EXEC"
STEP_END = "STEP_END"
EVENT_FIELDS = ("timestamp_ns", "step", "worker", "event", "detail")
ALL_WORKERS = -1


def to_ns(seconds: float) -> int:
    return int(round(seconds * NS))


@dataclass(frozen=True)
class SimConfig:
    world_size: int = 1
    steps: int = 3
    cycle_time: float = 1e-3
    coordinator: Strategy = Strategy.BITVECTOR
    fusion: FusionPolicy = field(default_factory=FusionPolicy.ungrouped)
    cost: CostModel = field(default_factory=CostModel)
    seed: int = 0
    t_misc: float = 0.0
    warmup_steps: int = 1
    cache_capacity: int = DEFAULT_CAPACITY
    record_header_bytes: int = 24
    coordinator_record_time: float = DEFAULT_RECORD_TIME
    stall_fraction: float = 1.0
    max_cycles_per_step: int = 1_000_000
    event_log: bool = False
    # None: replicate per-rank protocol state only when world_size <= 64
    replicate: bool | None = None
    verify_payloads: bool = False
    payload_length: int = 4

    def __post_init__(self):
        object.__setattr__(self, "coordinator", Strategy(self.coordinator))
        checks = [
            ("world_size", self.world_size >= 1, "must be >= 1"),
            ("steps", self.steps >= 1, "must be >= 1"),
            ("cycle_time", self.cycle_time > 0 and to_ns(self.cycle_time) > 0, "must be > 0 (ns resolution)"),
            ("t_misc", self.t_misc >= 0, "must be >= 0"),
            ("warmup_steps", self.warmup_steps >= 0, "must be >= 0"),
            ("cache_capacity", self.cache_capacity >= 1, "must be >= 1"),
            ("record_header_bytes", self.record_header_bytes >= 0, "must be >= 0"),
            ("coordinator_record_time", self.coordinator_record_time >= 0, "must be >= 0"),
            ("stall_fraction", 0 <= self.stall_fraction <= 1, "must be in [0, 1]"),
            ("max_cycles_per_step", self.max_cycles_per_step >= 1, "must be >= 1"),
            ("payload_length", self.payload_length >= 1, "must be >= 1"),
        ]
        for name, ok, msg in checks:
            if not ok:
                raise ConfigError(name, msg)

    @property
    def replicated(self) -> bool:
        return self.world_size <= REPLICATE_MAX_P if self.replicate is None else self.replicate

    def to_dict(self) -> dict:
        groups = self.fusion.groups
        return {
            "world_size": self.world_size,
            "steps": self.steps,
            "cycle_time_s": self.cycle_time,
            "coordinator": self.coordinator.value,
            "fusion_mode": self.fusion.mode.value,
            "fusion_buffer_bytes": self.fusion.fusion_buffer_bytes,
            "num_groups": len(groups.group_members) if groups else 0,
            "alpha_s": self.cost.alpha,
            "beta_s_per_byte": self.cost.beta,
            "algorithm": self.cost.algorithm.value,
            "tree_bandwidth_factor": self.cost.tree_bandwidth_factor,
            "seed": self.seed,
            "t_misc_s": self.t_misc,
            "warmup_steps": self.warmup_steps,
            "cache_capacity": self.cache_capacity,
            "record_header_bytes": self.record_header_bytes,
            "coordinator_record_time_s": self.coordinator_record_time,
            "stall_fraction": self.stall_fraction,
        }


class Event(NamedTuple):
    timestamp_ns: int
    step: int
    worker: int
    event: str
    detail: str


@dataclass
class StepMetrics:
    step: int
    t_exec: float
    t_comm: float
    t_comp: float
    t_misc: float
    cycles: int
    fallback_cycles: int
    batches: int
    coordination_time: float


@dataclass
class SimMetrics:
    config: SimConfig
    steps: list[StepMetrics]
    throughput: float
    measured_steps: int
    message_counter: MessageCounter
    events: list[Event] = field(default_factory=list)
    # executed[step][worker] -> tensor names in execution order (one shared row if not replicated)
    executed: list[list[tuple[str, ...]]] = field(default_factory=list)
    # step -> name -> (reduced payload, per-worker receive counts)
    reductions: list[dict] = field(default_factory=list)
    payloads: list[np.ndarray] = field(default_factory=list)
    paths: list[list[str]] = field(default_factory=list)

    @property
    def fallback_cycles(self) -> int:
        return sum(s.fallback_cycles for s in self.steps)

    @property
    def fallback_steps(self) -> list[int]:
        return [s.step for s in self.steps if s.fallback_cycles]

    def mean(self, attr: str, measured_only: bool = True) -> float:
        rows = self.steps[len(self.steps) - self.measured_steps:] if measured_only else self.steps
        return float(np.mean([getattr(s, attr) for s in rows]))

    def summary(self) -> dict:
        return {
            "throughput_per_s": self.throughput,
            "measured_steps": self.measured_steps,
            "t_exec_ms_mean": self.mean("t_exec") * 1e3,
            "t_comm_ms_mean": self.mean("t_comm") * 1e3,
            "t_comp_ms_mean": self.mean("t_comp") * 1e3,
            "t_misc_ms_mean": self.mean("t_misc") * 1e3,
            "fallback_cycles": self.fallback_cycles,
            "fallback_steps": self.fallback_steps,
            "gathers": self.message_counter.gathers,
            "broadcasts": self.message_counter.broadcasts,
        }


def scaling_efficiency(metrics: SimMetrics, baseline: SimMetrics) -> float:
    """Throughput relative to P times the single-worker throughput."""
    p = metrics.config.world_size
    if metrics is baseline or (p == 1 and baseline.config.world_size == 1 and metrics.throughput == baseline.throughput):
        return 1.0
    return metrics.throughput / (p * baseline.throughput / baseline.config.world_size)


class _Run:
    """Mutable state of one simulation; ``run()`` is the public entry point."""

    def __init__(self, config: SimConfig, workload: WorkloadGraph):
        config.fusion.validate(workload.tensors)
        self.cfg = config
        self.wl = workload
        self.P = config.world_size
        self.order = workload.readiness_order
        self.N = len(self.order)
        self.keys = [request_key(Request(0, t, CollectiveKind.ALLREDUCE)) for t in self.order]
        self.index = {t.name: j for j, t in enumerate(self.order)}
        intervals = workload.compute_intervals[::-1]
        self.base_ns = np.array([to_ns(workload.forward_time)] + [to_ns(c) for c in intervals], dtype=np.int64)
        self.ct = to_ns(config.cycle_time)
        self.misc_ns = to_ns(config.t_misc)
        self.stall_ns = to_ns(config.stall_fraction * latency_term(config.cost, self.P))
        self.replicated = config.replicated
        self.events: list[Event] = []
        self.counter = MessageCounter()

        P = self.P
        if config.coordinator is Strategy.MASTER_WORKER:
            self.coord = CoordinatorState(P, config.record_header_bytes)
            self.counter = self.coord.message_counter
        else:
            self.fallback = CoordinatorState(P, config.record_header_bytes)
            self.counter = self.fallback.message_counter
            if self.replicated:
                caches = [ResponseCache(config.cache_capacity) for _ in range(P)]
            else:
                shared = ResponseCache(config.cache_capacity)
                caches = [shared] * P
            self.workers = [WorkerState(w, caches[w]) for w in range(P)]
            self.bitvector_bytes = caches[0].capacity_bits // 8
        n_fusers = P if self.replicated else 1
        self.fusers = [Fuser(config.fusion) for _ in range(n_fusers)]

    def emit(self, ts, step, worker, event, detail=""):
        if self.cfg.event_log:
            self.events.append(Event(int(ts), step, worker, event, detail))

    # -- coordination -----------------------------------------------------

    def coordinate(self, new: list[list[int]], t: int, step: int):
        """One coordination round. Returns (per-rank response lists, cost_ns, path)."""
        cfg, P = self.cfg, self.P
        if cfg.coordinator is Strategy.MASTER_WORKER:
            reqs = [[Request(w, self.order[j]) for j in js] for w, js in enumerate(new)]
            self.coord.gather(reqs)
            responses = self.coord.form_and_order()
            cost = master_worker_cost(cfg.cost, P, self.coord.traffic, cfg.coordinator_record_time)
            self.emit(t, step, ALL_WORKERS, COORD_FAST, f"strategy=master-worker;responses={len(responses)}")
            return [responses] * (P if self.replicated else 1), to_ns(cost), None
        for w, js in enumerate(new):
            pend = self.workers[w].pending
            for j in js:
                pend[self.keys[j]] = Request(w, self.order[j])
        outcome = coordinate_cycle(self.workers, P, self.fallback)
        cost = collective_cost(cfg.cost, self.bitvector_bytes, P)
        if outcome.path is Path.FALLBACK:
            cost += master_worker_cost(cfg.cost, P, outcome.fallback_traffic, cfg.coordinator_record_time)
        ev = COORD_FAST if outcome.path is Path.FAST else COORD_FALLBACK
        self.emit(t, step, ALL_WORKERS, ev, f"strategy=bitvector;responses={len(outcome.responses[0])}")
        lists = outcome.responses if self.replicated else outcome.responses[:1]
        return lists, to_ns(cost), outcome.path

    def fuse(self, lists):
        per_rank = [f.submit(lst) for f, lst in zip(self.fusers, lists)]
        ref = [b.tensor_names for b in per_rank[0]]
        for w, batches in enumerate(per_rank[1:], start=1):
            if [b.tensor_names for b in batches] != ref:
                raise DeadlockDetected(f"rank {w} would issue collectives in a different order than rank 0")
        return per_rank

    # -- main loop --------------------------------------------------------

    def run(self) -> SimMetrics:
        cfg, P, N = self.cfg, self.P, self.N
        t = 0
        step_start = 0
        prev_new = prev_resp = 1
        prev_cost = 0
        prev_path = None
        steps: list[StepMetrics] = []
        executed_log, reductions, payload_log, paths_log = [], [], [], []

        for s in range(cfg.steps):
            rng = np.random.default_rng([cfg.seed, s])
            # the forward pass is N per-layer slices, each jittered on its own
            factors = self.wl.jitter.factors(rng, (P, 2 * N))
            durations = np.empty((P, N + 1), dtype=np.int64)
            durations[:, 0] = np.rint(factors[:, :N].mean(axis=1) * self.base_ns[0])
            durations[:, 1:] = np.maximum(np.rint(factors[:, N:] * self.base_ns[1:]), 1)
            comp_ns = durations.sum(axis=1)
            ready = step_start + np.cumsum(durations, axis=1)[:, 1:]
            ptr = np.zeros(P, dtype=np.int64)
            done = np.zeros(N, dtype=bool)
            n_done = 0
            cycles = fallback_cycles = n_batches = 0
            coord_ns = 0
            seqs = [[] for _ in range(len(self.fusers))]
            red: dict = {}
            payloads = None
            if cfg.verify_payloads:
                prng = np.random.default_rng([cfg.seed, s, 1])
                payloads = prng.integers(-1000, 1000, size=(P, N, cfg.payload_length), dtype=np.int64)
            step_paths = []

            while n_done < N:
                surfaced = (ready <= t).sum(axis=1)
                if prev_new == 0 and prev_resp == 0 and not np.any(surfaced > ptr):
                    # fixed point: identical no-op cycles until something becomes ready
                    pending_ready = [ready[w, ptr[w]] for w in range(P) if ptr[w] < N]
                    if not pending_ready:
                        raise DeadlockDetected(f"step {s}: {N - n_done} tensors can never be executed")
                    nxt = int(min(pending_ready))
                    period = max(self.ct, prev_cost)
                    k = -(-(nxt - t) // period)
                    self._skip(t, k, period, s, prev_path)
                    if prev_path is Path.FALLBACK:
                        fallback_cycles += k
                    coord_ns += k * prev_cost
                    t += k * period
                    continue

                cycles += 1
                if cycles > cfg.max_cycles_per_step:
                    raise DeadlockDetected(f"step {s}: exceeded {cfg.max_cycles_per_step} cycles")
                self.emit(t, s, ALL_WORKERS, CYCLE_MARK)
                new = []
                for w in range(P):
                    lo, hi = int(ptr[w]), int(surfaced[w])
                    new.append(range(lo, hi))
                    if cfg.event_log:
                        for j in range(lo, hi):
                            self.emit(ready[w, j], s, w, TENSOR_READY, self.order[j].name)
                n_new = int((surfaced - ptr).sum())
                ptr = surfaced

                lists, cost_ns, path = self.coordinate(new, t, s)
                if path is not None:
                    step_paths.append(path.value)
                if path is Path.FALLBACK:
                    fallback_cycles += 1
                coord_ns += cost_ns
                per_rank = self.fuse(lists)
                tc = t + cost_ns
                for b in per_rank[0]:
                    if self.stall_ns:
                        ready[ready > tc] += self.stall_ns
                    dur = to_ns(collective_cost(cfg.cost, b.total_bytes, P))
                    self.emit(
                        tc, s, ALL_WORKERS, BATCH_EXEC,
                        f"bytes={b.total_bytes};tensors={len(b.responses)};groups={','.join(map(str, sorted(b.group_ids)))}",
                    )
                    tc += dur
                    n_batches += 1
                    for name in b.tensor_names:
                        j = self.index[name]
                        if done[j]:
                            raise DeadlockDetected(f"step {s}: {name} reduced twice")
                        done[j] = True
                        n_done += 1
                        if payloads is not None:
                            red[name] = [reduce_oracle(list(payloads[:, j, :])), np.zeros(P, dtype=np.int64)]
                for w, batches in enumerate(per_rank):
                    for b in batches:
                        seqs[w].extend(b.tensor_names)
                        if payloads is not None:
                            for name in b.tensor_names:
                                if self.replicated:
                                    red[name][1][w] += 1
                                else:
                                    red[name][1][:] += 1
                prev_new = n_new
                prev_resp = len(lists[0])
                prev_cost = tc - t
                prev_path = path
                t = max(t + self.ct, tc)
                if n_done == N:
                    step_end = tc

            wall = step_end - step_start
            for w in range(P):
                self.emit(step_end, s, w, STEP_END, f"t_comp_ns={int(comp_ns[w])}")
            t_comp = comp_ns / NS
            steps.append(
                StepMetrics(
                    step=s,
                    t_exec=wall / NS + cfg.t_misc,
                    t_comm=float(np.mean((wall - comp_ns) / NS)),
                    t_comp=float(np.mean(t_comp)),
                    t_misc=cfg.t_misc,
                    cycles=cycles,
                    fallback_cycles=fallback_cycles,
                    batches=n_batches,
                    coordination_time=coord_ns / NS,
                )
            )
            executed_log.append([tuple(x) for x in seqs])
            paths_log.append(step_paths)
            if payloads is not None:
                reductions.append({k: (v[0], v[1]) for k, v in red.items()})
                payload_log.append(payloads)
            step_start = step_end + self.misc_ns

        measured = steps[cfg.warmup_steps:] if cfg.steps > cfg.warmup_steps else steps
        total = sum(m.t_exec for m in measured)
        throughput = P * len(measured) / total
        return SimMetrics(
            config=cfg,
            steps=steps,
            throughput=throughput,
            measured_steps=len(measured),
            message_counter=self.counter,
            events=self.events,
            executed=executed_log,
            reductions=reductions,
            payloads=payload_log,
            paths=paths_log,
        )

    def _skip(self, t, k, period, step, path):
        P = self.P
        self.counter.gathers += P * k
        self.counter.broadcasts += P * k
        if self.cfg.event_log:
            ev = COORD_FALLBACK if path is Path.FALLBACK else COORD_FAST
            strategy = "master-worker" if self.cfg.coordinator is Strategy.MASTER_WORKER else "bitvector"
            for i in range(k):
                self.emit(t + i * period, step, ALL_WORKERS, CYCLE_MARK)
                self.emit(t + i * period, step, ALL_WORKERS, ev, f"strategy={strategy};responses=0")


def run(config: SimConfig, workload: WorkloadGraph) -> SimMetrics:
    """Simulate ``config.steps`` fully synchronous training steps."""
    return _Run(config, workload).run()


# -- sweeps --------------------------------------------------------------

STRATEGIES = {
    "master-worker": (Strategy.MASTER_WORKER, False),
    "bitvector": (Strategy.BITVECTOR, False),
    "bitvector+grouping": (Strategy.BITVECTOR, True),
}
SWEEP_COLUMNS = ("strategy", "P", "throughput_per_s", "efficiency", "t_comm_ms_mean", "t_comp_ms_mean")


@dataclass(frozen=True)
class SweepRow:
    strategy: str
    P: int
    throughput_per_s: float
    efficiency: float
    t_comm_ms_mean: float
    t_comp_ms_mean: float


def strategy_config(base: SimConfig, strategy: str, workload: WorkloadGraph, groups: GroupSpec | None = None) -> SimConfig:
    try:
        coordinator, grouped = STRATEGIES[strategy]
    except KeyError:
        raise ConfigError("strategies", f"unknown strategy {strategy!r}") from None
    buf = base.fusion.fusion_buffer_bytes
    if grouped:
        spec = groups or base.fusion.groups or GroupSpec.contiguous(workload.tensors, DEFAULT_GROUPS)
        fusion = FusionPolicy.grouped(spec, buf)
    else:
        fusion = FusionPolicy.ungrouped(buf)
    return replace(base, coordinator=coordinator, fusion=fusion)


def _run_point(args):
    config, workload = args
    m = run(config, workload)
    return (config.world_size, m.throughput, m.mean("t_comm") * 1e3, m.mean("t_comp") * 1e3)


def efficiency_sweep(
    base: SimConfig,
    workload: WorkloadGraph,
    worker_counts: Sequence[int],
    strategies: Sequence[str] = tuple(STRATEGIES),
    groups: GroupSpec | None = None,
    jobs: int = 1,
) -> list[SweepRow]:
    """Throughput and scaling efficiency for every (strategy, P).

    Runs differ only in P and strategy. P=1 is always simulated as the
    efficiency baseline, even if not requested.
    """
    counts = sorted(set(int(p) for p in worker_counts) | {1})
    tasks = []
    for name in strategies:
        cfg = strategy_config(base, name, workload, groups)
        for p in counts:
            tasks.append((name, (replace(cfg, world_size=p, event_log=False), workload)))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_point, [t[1] for t in tasks]))
    else:
        results = [_run_point(t[1]) for t in tasks]
    by_strategy: dict[str, dict[int, tuple]] = {}
    for (name, _), res in zip(tasks, results):
        by_strategy.setdefault(name, {})[res[0]] = res
    wanted = set(int(p) for p in worker_counts)
    rows = []
    for name, points in by_strategy.items():
        base_tp = points[1][1]
        for p, (_, tp, comm, comp) in points.items():
            if p not in wanted:
                continue
            eff = 1.0 if p == 1 else tp / (p * base_tp)
            rows.append(SweepRow(name, p, tp, eff, comm, comp))
            log.info("sweep %s P=%d throughput=%.3f eff=%.4f", name, p, tp, eff)
    rows.sort(key=lambda r: (r.strategy, r.P))
    return rows


# -- output --------------------------------------------------------------

def emit_timeline(metrics: SimMetrics, out=None, fmt: str = "csv") -> str:
    """Render the event log, ordered by timestamp (stable), as CSV or JSON lines.

    Returns the text; also writes it to ``out`` (a path or a text stream) if given.
    """
    events = sorted(metrics.events, key=lambda e: e.timestamp_ns)
    buf = io.StringIO()
    if fmt == "csv":
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(EVENT_FIELDS)
        writer.writerows(events)
    elif fmt == "jsonl":
        for e in events:
            buf.write(json.dumps(dict(zip(EVENT_FIELDS, e))) + "\n")
    else:
        raise ConfigError("format", f"unknown timeline format {fmt!r}")
    text = buf.getvalue()
    if out is not None:
        if hasattr(out, "write"):
            out.write(text)
        else:
            with open(out, "w", newline="") as fh:
                fh.write(text)
    return text


def critical_path(workload: WorkloadGraph) -> float:
    """Compute time of one worker with no jitter: forward pass plus every backprop interval."""
    return (to_ns(workload.forward_time) + sum(to_ns(c) for c in workload.compute_intervals)) / NS


def sweep_counts(spec: str) -> list[int]:
    """Parse ``"1,2,4,...,1024"``; an ellipsis continues the geometric ratio of the two terms before it."""
    parts = [p.strip() for p in spec.split(",") if p.strip()]
    out: list[int] = []
    i = 0
    while i < len(parts):
        if parts[i] == "...":
            if len(out) < 2 or i + 1 >= len(parts):
                raise ConfigError("workers", "'...' needs two terms before it and one after")
            a, b = out[-2], out[-1]
            end = int(parts[i + 1])
            if b > a and b % a == 0:
                ratio = b // a
                x = b * ratio
                while x < end:
                    out.append(x)
                    x *= ratio
            else:
                step = b - a
                if step <= 0:
                    raise ConfigError("workers", "sequence before '...' must increase")
                out.extend(range(b + step, end, step))
            i += 1
            continue
        try:
            out.append(int(parts[i]))
        except ValueError:
            raise ConfigError("workers", f"not an integer: {parts[i]!r}") from None
        i += 1
    if not out or any(p < 1 for p in out):
        raise ConfigError("workers", "worker counts must be positive integers")
    return sorted(set(out))


def default_grouped_policy(workload: WorkloadGraph, n_groups: int = DEFAULT_GROUPS, fusion_buffer_bytes=None) -> FusionPolicy:
    spec = GroupSpec.contiguous(workload.tensors, n_groups)
    if fusion_buffer_bytes is None:
        return FusionPolicy.grouped(spec)
    return FusionPolicy.grouped(spec, fusion_buffer_bytes)


__all__ = [
    "SimConfig", "SimMetrics", "StepMetrics", "Event", "SweepRow", "run", "efficiency_sweep",
    "emit_timeline", "scaling_efficiency", "strategy_config", "critical_path", "sweep_counts",
    "STRATEGIES", "SWEEP_COLUMNS",
]
