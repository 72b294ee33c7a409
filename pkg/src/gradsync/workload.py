"""Gradient-tensor task graphs, their generators, and their JSON file format."""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from gradsync.errors import ConfigError
from gradsync.fusion import GroupSpec
from gradsync.protocol import TensorMeta

SCHEMA_VERSION = 1

# Single-GPU step split derived from the tensor-core timing table:
# forward = Conv2D_FWD + half the activation time, backward = the rest.
DEFAULT_FORWARD_S = (220.801 + 107.445 / 2) / 1e3
DEFAULT_BACKWARD_S = (226.612 + 166.337 + 107.445 / 2) / 1e3
DEFAULT_TOTAL_PARAMS = 220_000_000
DEFAULT_TENSOR_COUNT = 500


class JitterKind(str, enum.Enum):
    NONE = "none"
    UNIFORM = "uniform"
    NORMAL = "normal"


@dataclass(frozen=True)
class JitterSpec:
    """Relative noise on every compute interval: uniform in +-scale, or normal with sigma=scale."""

    kind: JitterKind = JitterKind.NONE
    scale: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "kind", JitterKind(self.kind))
        if self.scale < 0 or (self.kind is JitterKind.UNIFORM and self.scale >= 1):
            raise ConfigError("jitter.scale", f"invalid scale {self.scale} for {self.kind.value}")

    def factors(self, rng: np.random.Generator, shape) -> np.ndarray:
        if self.kind is JitterKind.NONE or self.scale == 0:
            return np.ones(shape)
        if self.kind is JitterKind.UNIFORM:
            return 1.0 + rng.uniform(-self.scale, self.scale, size=shape)
        # durations stay positive
        return np.maximum(1.0 + rng.normal(0.0, self.scale, size=shape), 0.01)

    def to_dict(self):
        return {"kind": self.kind.value, "scale": self.scale}


DEFAULT_JITTER = JitterSpec(JitterKind.UNIFORM, 0.05)


@dataclass(frozen=True)
class WorkloadGraph:
    tensors: tuple[TensorMeta, ...]
    compute_intervals: tuple[float, ...]
    forward_time: float = 0.0
    jitter: JitterSpec = field(default_factory=JitterSpec)
    profile: str = "custom"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "tensors", tuple(self.tensors))
        object.__setattr__(self, "compute_intervals", tuple(float(x) for x in self.compute_intervals))
        if not self.tensors:
            raise ConfigError("workload.tensors", "workload has no tensors")
        if len(self.compute_intervals) != len(self.tensors):
            raise ConfigError("workload.compute_intervals", "one interval per tensor required")
        if any(d <= 0 for d in self.compute_intervals):
            raise ConfigError("workload.compute_intervals", "durations must be positive")
        if self.forward_time < 0:
            raise ConfigError("workload.forward_time", "must be >= 0")
        names = [t.name for t in self.tensors]
        if len(set(names)) != len(names):
            raise ConfigError("workload.tensors", "tensor names must be unique")

    @property
    def readiness_order(self) -> tuple[TensorMeta, ...]:
        """Backprop order: last-created tensor's gradient is ready first."""
        return self.tensors[::-1]

    @property
    def total_bytes(self) -> int:
        return sum(t.message_bytes for t in self.tensors)

    @property
    def total_params(self) -> int:
        return sum(t.num_elements for t in self.tensors)

    @property
    def compute_time(self) -> float:
        return self.forward_time + sum(self.compute_intervals)

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "kind": "workload",
            "profile": self.profile,
            "seed": self.seed,
            "forward_time_s": self.forward_time,
            "jitter": self.jitter.to_dict(),
            "tensors": [
                {"name": t.name, "shape": list(t.shape), "element_bytes": t.element_bytes, "compute_s": c}
                for t, c in zip(self.tensors, self.compute_intervals)
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> WorkloadGraph:
        check_schema(data, "workload")
        try:
            tensors = [TensorMeta.from_shape(t["name"], t["shape"], t["element_bytes"]) for t in data["tensors"]]
            intervals = [t["compute_s"] for t in data["tensors"]]
            jitter = JitterSpec(**data.get("jitter", {}))
            return cls(
                tuple(tensors),
                tuple(intervals),
                float(data.get("forward_time_s", 0.0)),
                jitter,
                data.get("profile", "custom"),
                int(data.get("seed", 0)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError("workload", f"malformed workload file: {exc}") from exc

    def with_jitter(self, jitter: JitterSpec) -> WorkloadGraph:
        return WorkloadGraph(self.tensors, self.compute_intervals, self.forward_time, jitter, self.profile, self.seed)


def check_schema(data, kind: str) -> None:
    if not isinstance(data, dict):
        raise ConfigError("schema_version", f"{kind} file must be a JSON object")
    version = data.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigError("schema_version", f"unsupported {kind} schema_version {version!r} (expected {SCHEMA_VERSION})")


def _kernel_shape(n: int) -> tuple[int, ...]:
    if n % 9:
        return (n,)
    m = n // 9
    c = max(d for d in range(1, math.isqrt(m) + 1) if m % d == 0)
    return (3, 3, c, m // c)


def _split_exact(total: int, weights: np.ndarray) -> list[int]:
    """Largest-remainder apportionment; every part >= 1 and parts sum to ``total``."""
    n = len(weights)
    spare = total - n
    raw = weights / weights.sum() * spare
    base = np.floor(raw).astype(np.int64)
    short = spare - int(base.sum())
    order = np.argsort(-(raw - base), kind="stable")
    base[order[:short]] += 1
    return [int(x) + 1 for x in base]


def generate_workload(
    profile: str = "fc-densenet-like",
    total_params: int = DEFAULT_TOTAL_PARAMS,
    tensor_count: int = DEFAULT_TENSOR_COUNT,
    seed: int = 0,
    element_bytes: int = 2,
    forward_time: float = DEFAULT_FORWARD_S,
    backward_time: float = DEFAULT_BACKWARD_S,
    jitter: JitterSpec | None = None,
) -> WorkloadGraph:
    """Synthetic workload whose parameter count is exactly ``total_params``.

    ``fc-densenet-like`` sizes tensors on a geometric ramp that rises to a
    bottleneck and falls back, with mild per-tensor noise drawn from ``seed``.
    Per-layer sizes are synthetic; only the totals are meant to match the
    220M-parameter model.
    """
    if tensor_count < 1:
        raise ConfigError("tensor_count", "must be >= 1")
    if total_params < tensor_count:
        raise ConfigError("total_params", f"{total_params} < tensor_count {tensor_count}")
    if profile == "uniform":
        weights = np.ones(tensor_count)
    elif profile == "fc-densenet-like":
        rng = np.random.default_rng(seed)
        ramp = np.minimum(np.arange(tensor_count), np.arange(tensor_count)[::-1])
        ratio = 1000.0 ** (1.0 / max(1, tensor_count // 2))
        weights = ratio**ramp * rng.lognormal(0.0, 0.1, size=tensor_count)
    else:
        raise ConfigError("profile", f"unknown profile {profile!r}")
    if profile == "uniform":
        q, r = divmod(total_params, tensor_count)
        sizes = [q + (1 if i < r else 0) for i in range(tensor_count)]
    else:
        sizes = _split_exact(total_params, weights)
    tensors = tuple(
        TensorMeta.from_shape(f"layer{i:03d}/conv/kernel", _kernel_shape(n), element_bytes)
        for i, n in enumerate(sizes)
    )
    share = np.asarray(sizes, dtype=float) / total_params
    blend = 0.5 / tensor_count + 0.5 * share
    intervals = tuple(round(float(x), 9) for x in backward_time * blend / blend.sum())
    return WorkloadGraph(
        tensors,
        intervals,
        round(forward_time, 9),
        DEFAULT_JITTER if jitter is None else jitter,
        profile,
        seed,
    )


def load_workload(path) -> WorkloadGraph:
    return WorkloadGraph.from_dict(_read_json(path, "workload"))


def load_groups(path) -> GroupSpec:
    data = _read_json(path, "grouping")
    check_schema(data, "grouping")
    groups = data.get("groups")
    if not isinstance(groups, dict) or not all(isinstance(v, int) for v in groups.values()):
        raise ConfigError("groups", "expected a mapping tensor name -> integer group id")
    return GroupSpec(groups)


def groups_to_dict(spec: GroupSpec) -> dict:
    return {"schema_version": SCHEMA_VERSION, "kind": "grouping", "groups": dict(spec.assignments)}


def _read_json(path, what):
    p = Path(path)
    if not p.is_file():
        raise ConfigError(what, f"file not found: {p}")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(what, f"{p}: invalid JSON ({exc})") from exc


def tensor_index(tensors: Sequence[TensorMeta]) -> dict[str, int]:
    return {t.name: i for i, t in enumerate(tensors)}
