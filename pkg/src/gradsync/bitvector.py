"""Cached-response coordination with a single bitwise-AND reduction per cycle.

Every rank keeps an identical :class:`ResponseCache` that maps request keys to
bit positions. Each cycle a rank sets the bits of its pending requests, the
vectors are AND-reduced across ranks, and every rank decodes the surviving
bits in ascending order. Requests that are not cached yet fall back to one
master-worker round, whose responses are then cached everywhere.

Bits ``[0, RESERVED_BITS)`` carry status signals instead of requests. Status
signals must survive the reduction if *any* rank raises them, so ranks put
them on the wire inverted; one AND then yields NOT(AND(NOT s)) == OR(s).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from gradsync.errors import CapacityExceeded, CapacityMismatch, UnknownBit
from gradsync.master_worker import CoordinatorState, CycleTraffic
from gradsync.protocol import Request, Response, request_key, response_key

RESERVED_BITS = 2
CACHE_MISS = 0
SHUTDOWN = 1
WORD_BITS = 64
DEFAULT_CAPACITY = 4096

_STATUS_MASK = (1 << RESERVED_BITS) - 1


def words_for(capacity: int) -> int:
    """Number of 64-bit words needed for ``capacity`` entries plus status bits."""
    return -(-(RESERVED_BITS + capacity) // WORD_BITS)


class Path(str, enum.Enum):
    FAST = "FAST"
    FALLBACK = "FALLBACK"


class ResponseCache:
    def __init__(self, capacity: int = DEFAULT_CAPACITY):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.entries: dict[bytes, tuple[int, Response]] = {}
        self._by_bit: list[Response] = []
        self.next_bit = RESERVED_BITS

    @property
    def capacity_bits(self) -> int:
        return words_for(self.capacity) * WORD_BITS

    def __len__(self):
        return len(self.entries)

    def __contains__(self, key):
        return key in self.entries

    def insert(self, response: Response) -> int:
        key = response_key(response)
        hit = self.entries.get(key)
        if hit is not None:
            return hit[0]
        if len(self.entries) >= self.capacity:
            raise CapacityExceeded(f"response cache full ({self.capacity} entries)")
        bit = self.next_bit
        self.entries[key] = (bit, response)
        self._by_bit.append(response)
        self.next_bit += 1
        return bit

    def bit_of(self, key: bytes) -> int | None:
        hit = self.entries.get(key)
        return None if hit is None else hit[0]

    def response_at(self, bit: int) -> Response:
        idx = bit - RESERVED_BITS
        if idx < 0 or idx >= len(self._by_bit):
            raise UnknownBit(f"bit {bit} has no cache entry")
        return self._by_bit[idx]

    def key_map(self) -> dict[bytes, int]:
        return {k: bit for k, (bit, _) in self.entries.items()}


def cache_insert(cache: ResponseCache, response: Response) -> int:
    return cache.insert(response)


@dataclass(frozen=True)
class Bitvector:
    words: np.ndarray
    capacity_bits: int

    @classmethod
    def from_int(cls, value: int, capacity_bits: int) -> Bitvector:
        n = capacity_bits // WORD_BITS
        words = np.frombuffer(value.to_bytes(n * 8, "little"), dtype="<u8").copy()
        return cls(words, capacity_bits)

    @classmethod
    def from_bits(cls, bits: Iterable[int], capacity_bits: int) -> Bitvector:
        value = 0
        for b in bits:
            if not 0 <= b < capacity_bits:
                raise IndexError(f"bit {b} outside capacity {capacity_bits}")
            value |= 1 << b
        return cls.from_int(value, capacity_bits)

    def to_int(self) -> int:
        return int.from_bytes(self.words.astype("<u8").tobytes(), "little")

    def test(self, bit: int) -> bool:
        return bool((int(self.words[bit // WORD_BITS]) >> (bit % WORD_BITS)) & 1)

    def set_bits(self) -> list[int]:
        v = self.to_int()
        out = []
        while v:
            low = v & -v
            out.append(low.bit_length() - 1)
            v ^= low
        return out

    def payload_bits(self) -> list[int]:
        return [b for b in self.set_bits() if b >= RESERVED_BITS]

    @property
    def cache_miss(self) -> bool:
        return self.test(CACHE_MISS)

    @property
    def shutdown(self) -> bool:
        return self.test(SHUTDOWN)

    @property
    def nbytes(self) -> int:
        return self.capacity_bits // 8

    def __eq__(self, other):
        if not isinstance(other, Bitvector):
            return NotImplemented
        return self.capacity_bits == other.capacity_bits and np.array_equal(self.words, other.words)

    def __hash__(self):
        return hash((self.capacity_bits, self.words.tobytes()))


def populate(cache: ResponseCache, pending: Iterable[bytes], shutdown: bool = False) -> Bitvector:
    """Bitvector for one rank: cached pending keys, plus CACHE_MISS/SHUTDOWN status."""
    value = 0
    for key in pending:
        bit = cache.bit_of(key)
        if bit is None:
            value |= 1 << CACHE_MISS
        else:
            value |= 1 << bit
    if shutdown:
        value |= 1 << SHUTDOWN
    return Bitvector.from_int(value, cache.capacity_bits)


def _to_wire(words: np.ndarray) -> np.ndarray:
    wire = words.copy()
    wire[0] ^= np.uint64(_STATUS_MASK)
    return wire


def intersect(vectors: Sequence[Bitvector]) -> Bitvector:
    """AND payload bits, OR status bits, using one AND reduction."""
    if not vectors:
        raise ValueError("need at least one bitvector")
    cap = vectors[0].capacity_bits
    for v in vectors:
        if v.capacity_bits != cap:
            raise CapacityMismatch(f"capacity {v.capacity_bits} != {cap}")
    wire = np.stack([_to_wire(v.words) for v in vectors])
    reduced = np.bitwise_and.reduce(wire, axis=0)
    return Bitvector(_to_wire(reduced), cap)


def decode(cache: ResponseCache, intersected: Bitvector) -> list[Response]:
    """Responses for the set payload bits, ascending by bit position."""
    return [cache.response_at(b) for b in intersected.payload_bits()]


@dataclass
class WorkerState:
    """One rank's view: its cache and the requests it has not executed yet."""

    rank: int
    cache: ResponseCache
    pending: dict[bytes, Request] = field(default_factory=dict)
    submitted: set[bytes] = field(default_factory=set)
    shutdown: bool = False

    def add(self, request: Request) -> None:
        self.pending[request_key(request)] = request


@dataclass
class CycleOutcome:
    responses: list[list[Response]]
    path: Path
    intersected: Bitvector
    fallback_traffic: CycleTraffic | None = None
    shutdown: bool = False


def coordinate_cycle(
    workers: Sequence[WorkerState],
    world_size: int,
    fallback: CoordinatorState | None = None,
) -> CycleOutcome:
    """Run one coordination cycle over all ranks.

    Executed keys are removed from each worker's ``pending``. ``fallback`` is
    the coordinator used for uncached requests; it must persist across cycles
    so incomplete uncached requests are not resubmitted.
    """
    if len(workers) != world_size:
        raise ValueError(f"expected {world_size} workers, got {len(workers)}")
    vectors = [populate(w.cache, w.pending, w.shutdown) for w in workers]
    result = intersect(vectors)
    per_rank = [decode(w.cache, result) for w in workers]
    path = Path.FAST
    traffic = None
    if result.cache_miss:
        path = Path.FALLBACK
        if fallback is None:
            raise ValueError("cache miss signalled but no fallback coordinator supplied")
        new = []
        for w in workers:
            reqs = [r for k, r in w.pending.items() if k not in w.cache and k not in w.submitted]
            w.submitted.update(request_key(r) for r in reqs)
            new.append(reqs)
        responses = fallback.gather(new).form_and_order()
        traffic = fallback.traffic
        for w, decoded in zip(workers, per_rank):
            # Shared caches are filled once; insert() is idempotent anyway.
            for resp in responses:
                w.cache.insert(resp)
            decoded.extend(responses)
    for w, decoded in zip(workers, per_rank):
        for resp in decoded:
            key = response_key(resp)
            w.pending.pop(key, None)
            w.submitted.discard(key)
    return CycleOutcome(per_rank, path, result, traffic, result.shutdown)


def same_key_map(caches: Sequence[ResponseCache]) -> bool:
    maps = [c.key_map() for c in caches]
    return all(m == maps[0] for m in maps[1:])
