"""Tensor fusion and complete-group gating.

Ungrouped, every response that surfaces in a coordination cycle is packed
into fusion buffers right away, so message sizes follow the cycle time.
Grouped, a response waits until every member of its group has surfaced;
complete groups are then fused together, which puts a floor on message size
that does not depend on the cycle time.
"""

from __future__ import annotations

import enum
from collections import defaultdict
from dataclasses import dataclass
from functools import cached_property
from fractions import Fraction
from typing import Hashable, Iterable, Mapping, Sequence

from gradsync.errors import ConfigError, UnknownTensor
from gradsync.protocol import Response, TensorMeta

MiB = 1 << 20
DEFAULT_FUSION_BUFFER = 64 * MiB


@dataclass(frozen=True)
class GroupSpec:
    assignments: Mapping[str, int]

    def __post_init__(self):
        object.__setattr__(self, "assignments", dict(self.assignments))

    @cached_property
    def group_members(self) -> dict[int, frozenset[str]]:
        members = defaultdict(set)
        for name, gid in self.assignments.items():
            members[gid].add(name)
        return {gid: frozenset(names) for gid, names in sorted(members.items())}

    def group_of(self, name: str) -> int:
        try:
            return self.assignments[name]
        except KeyError:
            raise UnknownTensor(f"tensor {name!r} has no group assignment") from None

    def validate(self, tensors: Iterable[TensorMeta]) -> None:
        names = {t.name for t in tensors}
        missing = sorted(names - self.assignments.keys())
        if missing:
            raise ConfigError("grouping", f"{len(missing)} tensors unassigned, e.g. {missing[0]!r}")
        extra = sorted(self.assignments.keys() - names)
        if extra:
            raise ConfigError("grouping", f"unknown tensor {extra[0]!r} in group file")

    def group_bytes(self, tensors: Iterable[TensorMeta]) -> dict[int, int]:
        out: dict[int, int] = defaultdict(int)
        for t in tensors:
            out[self.group_of(t.name)] += t.message_bytes
        return dict(out)

    @classmethod
    def contiguous(cls, tensors: Sequence[TensorMeta], n_groups: int) -> GroupSpec:
        """Partition tensors, in reverse creation order, into ``n_groups`` runs of about equal bytes."""
        if n_groups < 1:
            raise ConfigError("groups", "must be >= 1")
        ordered = list(reversed(tensors))
        n_groups = min(n_groups, len(ordered))
        total = sum(t.message_bytes for t in ordered)
        assignments = {}
        acc = 0
        gid = 0
        for i, t in enumerate(ordered):
            assignments[t.name] = gid
            acc += t.message_bytes
            groups_left = n_groups - gid - 1
            tensors_left = len(ordered) - i - 1
            # close the group at its byte quota, or when every later group needs one tensor
            if groups_left and (acc * n_groups >= total * (gid + 1) or tensors_left == groups_left):
                gid += 1
        return cls(assignments)


class FusionMode(str, enum.Enum):
    UNGROUPED = "ungrouped"
    GROUPED = "grouped"


@dataclass(frozen=True)
class FusionPolicy:
    mode: FusionMode = FusionMode.UNGROUPED
    groups: GroupSpec | None = None
    fusion_buffer_bytes: int = DEFAULT_FUSION_BUFFER

    def __post_init__(self):
        object.__setattr__(self, "mode", FusionMode(self.mode))
        if self.fusion_buffer_bytes <= 0:
            raise ConfigError("fusion_buffer_bytes", "must be positive")
        if self.mode is FusionMode.GROUPED and self.groups is None:
            raise ConfigError("grouping", "grouped mode needs a GroupSpec")

    @classmethod
    def ungrouped(cls, fusion_buffer_bytes: int = DEFAULT_FUSION_BUFFER) -> FusionPolicy:
        return cls(FusionMode.UNGROUPED, None, fusion_buffer_bytes)

    @classmethod
    def grouped(cls, groups: GroupSpec, fusion_buffer_bytes: int = DEFAULT_FUSION_BUFFER) -> FusionPolicy:
        return cls(FusionMode.GROUPED, groups, fusion_buffer_bytes)

    def validate(self, tensors: Sequence[TensorMeta]) -> None:
        largest = max((t.message_bytes for t in tensors), default=0)
        if largest > self.fusion_buffer_bytes:
            raise ConfigError(
                "fusion_buffer_bytes",
                f"{self.fusion_buffer_bytes} is smaller than the largest tensor ({largest} bytes)",
            )
        if self.mode is FusionMode.GROUPED:
            self.groups.validate(tensors)


@dataclass(frozen=True)
class FusionBatch:
    responses: tuple[Response, ...]
    total_bytes: int
    group_ids: frozenset[int] = frozenset()

    @property
    def tensor_names(self) -> tuple[str, ...]:
        return tuple(n for r in self.responses for n in r.tensor_names)


def _batch(responses, group_ids=()):
    return FusionBatch(tuple(responses), sum(r.message_bytes for r in responses), frozenset(group_ids))


def select_batches(
    ready: Sequence[Response],
    policy: FusionPolicy,
    deferred: Sequence[Response] = (),
) -> tuple[list[FusionBatch], list[Response]]:
    """Fuse ``deferred + ready`` into batches; return (batches, still-deferred)."""
    limit = policy.fusion_buffer_bytes
    if policy.mode is FusionMode.UNGROUPED:
        batches, cur, cur_bytes = [], [], 0
        for resp in list(deferred) + list(ready):
            size = resp.message_bytes
            if cur and cur_bytes + size > limit:
                batches.append(_batch(cur))
                cur, cur_bytes = [], 0
            cur.append(resp)
            cur_bytes += size
        if cur:
            batches.append(_batch(cur))
        return batches, []

    spec = policy.groups
    members = spec.group_members
    pool = list(deferred) + list(ready)
    by_group: dict[int, list[Response]] = {}
    seen: dict[int, set[str]] = defaultdict(set)
    for resp in pool:
        gids = {spec.group_of(n) for n in resp.tensor_names}
        if len(gids) != 1:
            raise UnknownTensor(f"response {resp.tensor_names} spans groups {sorted(gids)}")
        gid = gids.pop()
        by_group.setdefault(gid, []).append(resp)
        seen[gid].update(resp.tensor_names)
    complete = [gid for gid in by_group if seen[gid] == members[gid]]
    complete_set = set(complete)

    batches = []
    cur, cur_ids, cur_bytes = [], [], 0
    for gid in complete:
        group = by_group[gid]
        size = sum(r.message_bytes for r in group)
        # split only at group boundaries; an oversized group travels alone
        if cur and cur_bytes + size > limit:
            batches.append(_batch(cur, cur_ids))
            cur, cur_ids, cur_bytes = [], [], 0
        cur.extend(group)
        cur_ids.append(gid)
        cur_bytes += size
    if cur:
        batches.append(_batch(cur, cur_ids))
    # keep pool order inside each batch
    order = {id(r): i for i, r in enumerate(pool)}
    batches = [
        FusionBatch(tuple(sorted(b.responses, key=lambda r: order[id(r)])), b.total_bytes, b.group_ids)
        for b in batches
    ]
    still = [r for r in pool if spec.group_of(r.tensor_names[0]) not in complete_set]
    return batches, still


class Fuser:
    """Per-worker fusion state: the queue of responses waiting for their group."""

    def __init__(self, policy: FusionPolicy):
        self.policy = policy
        self.deferred: list[Response] = []

    def submit(self, ready: Sequence[Response]) -> list[FusionBatch]:
        batches, self.deferred = select_batches(ready, self.policy, self.deferred)
        return batches


def _exact(t) -> Fraction:
    if isinstance(t, int):
        return Fraction(t)
    return Fraction(repr(float(t)))


def cycle_index(arrival, cycle_time) -> int:
    """Cycle in which an arrival surfaces: (k*ct, (k+1)*ct] maps to k+1."""
    if cycle_time <= 0:
        raise ValueError("cycle_time must be positive")
    q = _exact(arrival) / _exact(cycle_time)
    n = q.numerator // q.denominator
    return n if n == q else n + 1


def cycle_scope(stream: Iterable[tuple[float, Hashable]], cycle_time) -> dict[int, list]:
    """Bucket a time-stamped stream into per-cycle ready lists (arrival order kept)."""
    out: dict[int, list] = defaultdict(list)
    for t, item in sorted(stream, key=lambda e: e[0]):
        out[cycle_index(t, cycle_time)].append(item)
    return dict(sorted(out.items()))


def replay_trace(
    trace: Iterable[tuple[float, Response]],
    policy: FusionPolicy,
    cycle_time,
) -> tuple[list[FusionBatch], list[Response]]:
    """Feed an arrival trace through cycle scoping and fusion; no costs, no coordination."""
    fuser = Fuser(policy)
    batches: list[FusionBatch] = []
    for _, ready in cycle_scope(trace, cycle_time).items():
        batches.extend(fuser.submit(ready))
    return batches, fuser.deferred
