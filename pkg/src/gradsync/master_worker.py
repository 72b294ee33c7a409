"""Baseline coordination: rank 0 gathers requests and broadcasts an ordered response list."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

from gradsync.errors import DuplicateSubmission
from gradsync.protocol import Request, Response, merge_requests, request_key

COORDINATOR_RANK = 0
DEFAULT_HEADER_BYTES = 24


def record_bytes(name: str, header_bytes: int = DEFAULT_HEADER_BYTES) -> int:
    """Serialized size estimate of one request or response record."""
    return header_bytes + len(name.encode("utf-8"))


@dataclass
class MessageCounter:
    gathers: int = 0
    broadcasts: int = 0
    gathered_records: int = 0
    gathered_bytes: int = 0
    broadcast_bytes: int = 0


@dataclass
class CycleTraffic:
    """What one coordination round moved; input to the cost model."""

    gathered_records: int = 0
    gathered_bytes: int = 0
    broadcast_records: int = 0
    broadcast_bytes: int = 0


class CoordinatorState:
    """Pending-request table held by the coordinator rank.

    Keys keep first-arrival order, which is the order responses are
    broadcast in. Incomplete keys survive across cycles.
    """

    def __init__(self, world_size: int, header_bytes: int = DEFAULT_HEADER_BYTES):
        if world_size < 1:
            raise ValueError("world_size must be >= 1")
        self.world_size = world_size
        self.header_bytes = header_bytes
        self.pending: dict[bytes, list[Request]] = {}
        self._ranks: dict[bytes, set[int]] = {}
        self.message_counter = MessageCounter()
        self.traffic = CycleTraffic()

    def gather(self, rank_requests: Sequence[Sequence[Request]] | Mapping[int, Sequence[Request]]):
        """Accumulate one cycle of requests. ``rank_requests[r]`` holds rank r's new requests."""
        if isinstance(rank_requests, Mapping):
            items = sorted(rank_requests.items())
        else:
            items = list(enumerate(rank_requests))
        self.traffic = CycleTraffic()
        for rank, requests in items:
            for req in requests:
                if req.rank != rank:
                    raise ValueError(f"request from rank {req.rank} submitted in rank {rank}'s list")
                key = request_key(req)
                ranks = self._ranks.setdefault(key, set())
                if rank in ranks:
                    raise DuplicateSubmission(f"rank {rank} submitted {req.tensor.name!r} twice")
                ranks.add(rank)
                self.pending.setdefault(key, []).append(req)
                self.traffic.gathered_records += 1
                self.traffic.gathered_bytes += record_bytes(req.tensor.name, self.header_bytes)
        self.message_counter.gathers += self.world_size
        self.message_counter.gathered_records += self.traffic.gathered_records
        self.message_counter.gathered_bytes += self.traffic.gathered_bytes
        return self

    def form_and_order(self) -> list[Response]:
        """Responses for fully-submitted keys, in first-arrival order."""
        out = []
        for key in [k for k, ranks in self._ranks.items() if len(ranks) == self.world_size]:
            out.append(merge_requests(self.pending.pop(key), self.world_size))
            del self._ranks[key]
        nbytes = sum(record_bytes(r.tensor_names[0], self.header_bytes) for r in out)
        self.traffic.broadcast_records = len(out)
        self.traffic.broadcast_bytes = nbytes
        self.message_counter.broadcasts += self.world_size
        self.message_counter.broadcast_bytes += nbytes
        return out

    def has_pending(self) -> bool:
        return bool(self.pending)


def gather(coordinator: CoordinatorState, rank_requests) -> CoordinatorState:
    return coordinator.gather(rank_requests)


def form_and_order(coordinator: CoordinatorState) -> list[Response]:
    return coordinator.form_and_order()
