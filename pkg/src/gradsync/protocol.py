"""Request/response vocabulary shared by the coordinators and the fusion engine.

A worker submits a :class:`Request` when a gradient tensor is ready. Once every
rank has submitted a request with the same key, the coordinator forms a
:class:`Response`, which is what actually gets executed.
"""

from __future__ import annotations

import enum
import math
import struct
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Sequence

from gradsync.errors import MetadataMismatch

BROADCAST_ROOT = 0


class CollectiveKind(str, enum.Enum):
    ALLREDUCE = "allreduce"
    ALLGATHER = "allgather"
    BROADCAST = "broadcast"


@dataclass(frozen=True)
class TensorMeta:
    name: str
    num_elements: int
    element_bytes: int
    shape: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(d) for d in self.shape))
        if not self.name:
            raise ValueError("tensor name must be non-empty")
        if self.num_elements <= 0 or self.element_bytes <= 0:
            raise ValueError(f"{self.name}: sizes must be positive")
        if any(d <= 0 for d in self.shape):
            raise ValueError(f"{self.name}: shape dims must be positive")
        if math.prod(self.shape) != self.num_elements:
            raise ValueError(
                f"{self.name}: product(shape)={math.prod(self.shape)} != num_elements={self.num_elements}"
            )

    @classmethod
    def from_shape(cls, name: str, shape: Sequence[int], element_bytes: int = 2) -> TensorMeta:
        return cls(name, math.prod(shape), element_bytes, tuple(shape))

    @property
    def message_bytes(self) -> int:
        return self.num_elements * self.element_bytes


@dataclass(frozen=True)
class Request:
    rank: int
    tensor: TensorMeta
    kind: CollectiveKind = CollectiveKind.ALLREDUCE

    @property
    def key(self) -> bytes:
        return request_key(self)


@dataclass(frozen=True)
class Response:
    kind: CollectiveKind
    tensor_names: tuple[str, ...]
    participating_ranks: frozenset[int]
    # Allgather: ((rank, displacement), ...); Broadcast: (("root", 0),); Allreduce: ()
    aggregated_meta: tuple = ()
    tensors: tuple[TensorMeta, ...] = field(default=(), compare=False, repr=False)

    def __post_init__(self):
        if not self.tensor_names:
            raise ValueError("response must name at least one tensor")
        if len(set(self.tensor_names)) != len(self.tensor_names):
            raise ValueError(f"duplicate tensor names in response: {self.tensor_names}")

    @property
    def message_bytes(self) -> int:
        return sum(t.message_bytes for t in self.tensors)

    def executable(self, world_size: int) -> bool:
        return self.participating_ranks == frozenset(range(world_size))


class _Incomplete:
    """Marker returned when not every rank has submitted yet."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "INCOMPLETE"

    def __bool__(self):
        return False


INCOMPLETE = _Incomplete()


def _field(data: bytes) -> bytes:
    return struct.pack(">I", len(data)) + data


@lru_cache(maxsize=1 << 16)
def _canonical_key(tensor: TensorMeta, kind: CollectiveKind) -> bytes:
    shape = b"".join(struct.pack(">Q", d) for d in tensor.shape)
    return b"".join(
        (
            _field(tensor.name.encode("utf-8")),
            _field(shape),
            _field(struct.pack(">Q", tensor.num_elements)),
            _field(struct.pack(">I", tensor.element_bytes)),
            _field(kind.value.encode("ascii")),
        )
    )


def request_key(request: Request) -> bytes:
    """Canonical, rank-independent cache key for ``request``."""
    return _canonical_key(request.tensor, CollectiveKind(request.kind))


def response_key(response: Response) -> bytes:
    """Key of the request a single-tensor response answers."""
    if len(response.tensors) != 1:
        raise ValueError("only single-tensor responses have a request key")
    return _canonical_key(response.tensors[0], response.kind)


def merge_requests(requests: Iterable[Request], world_size: int):
    """Combine same-key requests from several ranks.

    Returns a :class:`Response` once all ``world_size`` ranks are present,
    otherwise :data:`INCOMPLETE`. Raises :class:`MetadataMismatch` if two
    requests name the same tensor with different metadata or collective kind.
    """
    requests = list(requests)
    if not requests:
        return INCOMPLETE
    first = requests[0]
    for req in requests[1:]:
        if req.tensor.name != first.tensor.name:
            raise MetadataMismatch(
                f"requests for different tensors merged: {first.tensor.name!r} vs {req.tensor.name!r}"
            )
        if req.tensor != first.tensor or req.kind != first.kind:
            raise MetadataMismatch(
                f"{first.tensor.name!r}: rank {first.rank} has {first.tensor.shape}/{first.kind.value}, "
                f"rank {req.rank} has {req.tensor.shape}/{req.kind.value}"
            )
    ranks = frozenset(r.rank for r in requests)
    if len(ranks) < world_size:
        return INCOMPLETE
    kind = CollectiveKind(first.kind)
    if kind is CollectiveKind.ALLGATHER:
        n = first.tensor.num_elements
        meta = tuple((r, r * n) for r in sorted(ranks))
    elif kind is CollectiveKind.BROADCAST:
        meta = (("root", BROADCAST_ROOT),)
    else:
        meta = ()
    return Response(kind, (first.tensor.name,), ranks, meta, (first.tensor,))
