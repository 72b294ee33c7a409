"""Convolution operation counts and per-step performance accounting.

Operation counts assume direct convolution: ``2 * H * W * C * K * R * S``
per layer and direction (multiply plus add). A training step runs three
convolution passes (forward, backprop w.r.t. kernels, backprop w.r.t.
inputs), each with the same count, so

    sustained = 3 * OPS / t_exec        peak = 3 * OPS / t_comp

where ``t_exec = t_comp + t_comm + t_misc`` over all profiled records and
``t_comp`` covers the three convolution records only. Activation kernels are
profiled as compute but are not part of ``t_comp`` here. Counting them would
give a peak well below the published one.

FLOPS use base-10 prefixes.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

from gradsync.errors import ConfigError, MissingRecord

CONV_RECORDS = ("Conv2D_FWD", "Conv2D_BackpropKernel", "Conv2D_BackpropInput")
CONV_PASSES = len(CONV_RECORDS)
TIMING_COLUMNS = {"tc": "duration_ms_tc", "no_tc": "duration_ms_no_tc"}
SCHEMA_VERSION = 1

_PREFIXES = [(1e18, "E"), (1e15, "P"), (1e12, "T"), (1e9, "G"), (1e6, "M"), (1e3, "k"), (1.0, "")]


class Category(str, enum.Enum):
    COMPUTE = "compute"
    COMMUNICATION = "communication"
    OTHER = "other"

    @classmethod
    def parse(cls, text: str) -> Category:
        text = (text or "").strip().lower()
        if text in ("", "-", "other"):
            return cls.OTHER
        try:
            return cls(text)
        except ValueError:
            raise ConfigError("type", f"unknown timing category {text!r}") from None


@dataclass(frozen=True)
class ConvLayerSpec:
    H: int
    W: int
    C: int
    K: int
    R: int
    S: int
    name: str = ""

    def __post_init__(self):
        for dim in ("H", "W", "C", "K", "R", "S"):
            v = getattr(self, dim)
            if isinstance(v, bool) or not isinstance(v, int) or v <= 0:
                raise ConfigError(f"layer.{dim}", f"must be a positive integer, got {v!r}")


def conv_ops(layer: ConvLayerSpec) -> int:
    """Multiply-add count of one direct 2-D convolution; exact Python integer."""
    return 2 * layer.H * layer.W * layer.C * layer.K * layer.R * layer.S


def total_conv_ops(layers: Iterable[ConvLayerSpec]) -> int:
    return sum(conv_ops(layer) for layer in layers)


@dataclass(frozen=True)
class TimingRecord:
    op_name: str
    category: Category
    duration_ms: float

    def __post_init__(self):
        object.__setattr__(self, "category", Category(self.category))
        if not self.duration_ms >= 0:
            raise ConfigError("duration_ms", f"{self.op_name}: must be >= 0")


@dataclass(frozen=True)
class Decomposition:
    t_exec_ms: float
    t_comp_ms: float
    t_comm_ms: float
    t_misc_ms: float
    t_conv_ms: float


def decompose(timings: Sequence[TimingRecord]) -> Decomposition:
    """Split profiled records into compute, communication, and other time."""
    by_cat = {c: 0.0 for c in Category}
    for rec in timings:
        by_cat[rec.category] += rec.duration_ms
    conv = sum(r.duration_ms for r in timings if r.op_name in CONV_RECORDS)
    return Decomposition(
        t_exec_ms=sum(r.duration_ms for r in timings),
        t_comp_ms=by_cat[Category.COMPUTE],
        t_comm_ms=by_cat[Category.COMMUNICATION],
        t_misc_ms=by_cat[Category.OTHER],
        t_conv_ms=conv,
    )


@dataclass(frozen=True)
class PerfReport:
    total_conv_ops: int
    t_exec_ms: float
    t_comp_ms: float
    sustained_flops: float
    peak_flops: float
    num_gpus: int = 1
    scaling_efficiency: float = 1.0

    @property
    def is_aggregate(self) -> bool:
        return self.num_gpus > 1 or self.scaling_efficiency != 1.0

    def to_dict(self) -> dict:
        return {
            "total_conv_ops": self.total_conv_ops,
            "total_math_ops": CONV_PASSES * self.total_conv_ops,
            "t_exec_ms": self.t_exec_ms,
            "t_comp_ms": self.t_comp_ms,
            "sustained_flops": self.sustained_flops,
            "peak_flops": self.peak_flops,
            "num_gpus": self.num_gpus,
            "scaling_efficiency": self.scaling_efficiency,
        }

    def lines(self) -> list[str]:
        scope = f"aggregate over {self.num_gpus} GPUs x efficiency {self.scaling_efficiency:g}" if self.is_aggregate else "per GPU"
        return [
            f"scope: {scope}",
            f"conv ops per direction: {self.total_conv_ops:.4g}",
            f"t_exec: {self.t_exec_ms:.3f} ms",
            f"t_comp: {self.t_comp_ms:.3f} ms",
            f"sustained: {format_flops(self.sustained_flops)}",
            f"peak: {format_flops(self.peak_flops)}",
        ]


def performance(total_conv_ops: int, timings: Sequence[TimingRecord]) -> PerfReport:
    """Sustained and peak throughput of one GPU for one training step."""
    if not timings:
        raise ConfigError("timings", "no timing records")
    names = {r.op_name for r in timings}
    missing = [n for n in CONV_RECORDS if n not in names]
    if missing:
        raise MissingRecord(f"convolution record(s) absent: {', '.join(missing)}")
    parts = decompose(timings)
    if parts.t_exec_ms <= 0 or parts.t_conv_ms <= 0:
        raise ConfigError("timings", "t_exec and convolution time must be positive")
    work = CONV_PASSES * total_conv_ops
    return PerfReport(
        total_conv_ops=total_conv_ops,
        t_exec_ms=parts.t_exec_ms,
        t_comp_ms=parts.t_conv_ms,
        sustained_flops=work / (parts.t_exec_ms / 1e3),
        peak_flops=work / (parts.t_conv_ms / 1e3),
    )


def mean_exec_time(per_rank_t_exec_ms: Sequence[float]) -> float:
    """Multi-node t_exec: the average over ranks."""
    if not per_rank_t_exec_ms:
        raise ConfigError("t_exec", "no per-rank timings")
    return sum(per_rank_t_exec_ms) / len(per_rank_t_exec_ms)


def aggregate(report: PerfReport, num_gpus: int, scaling_efficiency: float = 1.0) -> PerfReport:
    """Scale per-GPU figures to ``num_gpus`` and discount by the measured efficiency."""
    if num_gpus < 1:
        raise ConfigError("gpus", "must be >= 1")
    if not 0 < scaling_efficiency <= 1:
        raise ConfigError("efficiency", "must be in (0, 1]")
    factor = num_gpus * scaling_efficiency
    return replace(
        report,
        sustained_flops=report.sustained_flops * factor,
        peak_flops=report.peak_flops * factor,
        num_gpus=report.num_gpus * num_gpus,
        scaling_efficiency=report.scaling_efficiency * scaling_efficiency,
    )


def format_flops(value: float, digits: int = 2) -> str:
    for scale, prefix in _PREFIXES:
        if abs(value) >= scale:
            return f"{value / scale:.{digits}f} {prefix}FLOPS"
    return f"{value:.{digits}f} FLOPS"


# -- files ---------------------------------------------------------------

def bundled(name: str) -> Path:
    return Path(str(resources.files("gradsync") / "data" / name))


def _load(path, what):
    p = Path(path)
    try:
        data = json.loads(p.read_text())
    except FileNotFoundError:
        raise ConfigError(what, f"file not found: {p}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(what, f"{p}: invalid JSON ({exc})") from exc
    if not isinstance(data, dict) or data.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError("schema_version", f"{p}: expected schema_version {SCHEMA_VERSION}")
    return data


def load_timings(path=None, column: str = "tc") -> list[TimingRecord]:
    """Timing records from a table file; ``column`` selects tensor-core (tc) or no_tc durations."""
    if column not in TIMING_COLUMNS:
        raise ConfigError("column", f"expected one of {sorted(TIMING_COLUMNS)}")
    data = _load(path or bundled("table1.json"), "timings")
    key = TIMING_COLUMNS[column]
    try:
        return [
            TimingRecord(row["op_name"], Category.parse(row["type"]), float(row[key]))
            for row in data["records"]
        ]
    except (KeyError, TypeError) as exc:
        raise ConfigError("timings", f"malformed timing record: {exc}") from exc


def load_layers(path=None) -> list[ConvLayerSpec]:
    data = _load(path or bundled("fitted_layers.json"), "layers")
    try:
        return [
            ConvLayerSpec(row["H"], row["W"], row["C"], row["K"], row["R"], row["S"], row.get("name", ""))
            for row in data["layers"]
        ]
    except (KeyError, TypeError) as exc:
        raise ConfigError("layers", f"malformed layer record: {exc}") from exc
