"""Collective timing (alpha-beta) and reference reduction semantics.

The ring and tree formulas are calibration models from standard alpha-beta
analysis, not measurements. Defaults loosely follow a 100 GB/s bidirectional
link (12.5 GB/s per direction after protocol overhead) and 5 us per hop.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from gradsync.errors import ConfigError, LengthMismatch
from gradsync.master_worker import CycleTraffic

DEFAULT_ALPHA = 5e-6
DEFAULT_BETA = 1 / 12.5e9


class Algorithm(str, enum.Enum):
    RING = "ring"
    TREE = "tree"


class Strategy(str, enum.Enum):
    MASTER_WORKER = "master-worker"
    BITVECTOR = "bitvector"


@dataclass(frozen=True)
class CostModel:
    alpha: float = DEFAULT_ALPHA
    beta: float = DEFAULT_BETA
    algorithm: Algorithm = Algorithm.TREE
    tree_bandwidth_factor: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "algorithm", Algorithm(self.algorithm))
        if self.alpha < 0:
            raise ConfigError("alpha", "must be >= 0")
        if self.beta < 0:
            raise ConfigError("beta", "must be >= 0")
        if self.tree_bandwidth_factor <= 0:
            raise ConfigError("tree_bandwidth_factor", "must be positive")


def tree_depth(world_size: int) -> int:
    return math.ceil(math.log2(world_size)) if world_size > 1 else 0


def latency_term(model: CostModel, world_size: int) -> float:
    """The alpha part of one allreduce."""
    if world_size <= 1:
        return 0.0
    if model.algorithm is Algorithm.RING:
        return 2 * (world_size - 1) * model.alpha
    return 2 * tree_depth(world_size) * model.alpha


def bandwidth_term(model: CostModel, message_bytes: int, world_size: int) -> float:
    if world_size <= 1:
        return 0.0
    if model.algorithm is Algorithm.RING:
        return 2 * ((world_size - 1) / world_size) * message_bytes * model.beta
    return 2 * message_bytes * model.beta * model.tree_bandwidth_factor


def collective_cost(model: CostModel, message_bytes: int, world_size: int) -> float:
    """Seconds for one allreduce of ``message_bytes`` over ``world_size`` ranks."""
    if world_size < 1:
        raise ValueError("world_size must be >= 1")
    if world_size == 1:
        return 0.0
    return latency_term(model, world_size) + bandwidth_term(model, message_bytes, world_size)


def master_worker_cost(
    model: CostModel,
    world_size: int,
    traffic: CycleTraffic,
    record_time: float = 0.0,
) -> float:
    """Gatherv to the coordinator, its per-record processing, then a tree broadcast.

    ``record_time`` is coordinator CPU time per gathered request record; it
    is what makes the baseline grow with P times the tensor count.
    """
    processing = traffic.gathered_records * record_time
    if world_size <= 1:
        return processing
    depth = tree_depth(world_size)
    gather = depth * model.alpha + traffic.gathered_bytes * model.beta
    bcast = depth * (model.alpha + traffic.broadcast_bytes * model.beta)
    return gather + processing + bcast


def coordination_cost(
    model: CostModel,
    strategy: Strategy,
    world_size: int,
    traffic: CycleTraffic | None = None,
    *,
    bitvector_bytes: int = 0,
    record_time: float = 0.0,
) -> float:
    """Cost of one coordination round.

    Master-worker is charged from ``traffic``. Bitvector is one allreduce of
    the whole word array, whatever the number of pending tensors; a fallback
    round on a cache miss is charged separately by the caller via
    :func:`master_worker_cost`.
    """
    strategy = Strategy(strategy)
    if strategy is Strategy.BITVECTOR:
        return collective_cost(model, bitvector_bytes, world_size)
    return master_worker_cost(model, world_size, traffic or CycleTraffic(), record_time)


def reduce_oracle(payloads: Sequence[np.ndarray]) -> np.ndarray:
    """Elementwise sum over workers; every worker receives this same array."""
    if not len(payloads):
        raise ValueError("no payloads")
    arrays = [np.asarray(p) for p in payloads]
    n = arrays[0].shape
    for a in arrays[1:]:
        if a.shape != n:
            raise LengthMismatch(f"payload shape {a.shape} != {n}")
    out = arrays[0].copy()
    for a in arrays[1:]:
        out = out + a
    return out


def allclose_reduction(a: np.ndarray, b: np.ndarray, rtol: float = 1e-6) -> bool:
    """Float payload comparison; reduction order is unspecified in real collectives."""
    a, b = np.asarray(a), np.asarray(b)
    if np.issubdtype(a.dtype, np.integer) and np.issubdtype(b.dtype, np.integer):
        return bool(np.array_equal(a, b))
    return bool(np.allclose(a, b, rtol=rtol, atol=0.0))
