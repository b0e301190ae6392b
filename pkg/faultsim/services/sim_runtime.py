"""Deterministic single-process simulation of a message-passing cluster.

Simulated time is an exact rational clock. Every message, collective, failure
and injected fault is appended to the cluster ledger in occurrence order, so a
run is fully determined by its seed and fault plan.
"""

from __future__ import annotations

import hashlib
import heapq
import itertools
import json
import logging
from collections import defaultdict, deque
from dataclasses import dataclass, field
from fractions import Fraction
from typing import TYPE_CHECKING, Any, Callable, Iterable, Sequence

import numpy as np

from faultsim.errors import ConfigurationError, RankFailure, SimulationDeadlock, UsageError
from faultsim.schemas import ClusterSpec, CollectiveOp, JitterKind, JitterModel, RankStatus, as_time
from faultsim.services.srp_memory import MemoryRegistry

if TYPE_CHECKING:
    from faultsim.services.fault_injector import FaultInjector

logger = logging.getLogger(__name__)

TIME_QUANTUM = 10**9


def quantize(value: float) -> Fraction:
    """Snap a sampled float duration to the 1e-9 grid of the simulated clock."""
    return Fraction(round(value * TIME_QUANTUM), TIME_QUANTUM)


def ordered_sum(contributions: Sequence[Any]) -> float | np.ndarray:
    """Sum per-rank term arrays strictly left to right in rank order.

    A contribution is a scalar, a 1-D array of terms, or a (terms, k) array for
    k fused reductions. The result only depends on the concatenated term
    sequence, never on how it is split across ranks.
    """
    parts = [np.asarray(c, dtype=np.float64) for c in contributions]
    if not parts:
        raise UsageError("reduction needs at least one contribution")
    width = None
    stacked = []
    for part in parts:
        if part.ndim == 0:
            part = part.reshape(1)
        if part.ndim == 2:
            width = part.shape[1] if width is None else width
            if part.shape[1] != width:
                raise UsageError("fused contributions disagree on the number of reductions")
        stacked.append(part)
    if width is not None:
        stacked = [p if p.ndim == 2 else p.reshape(-1, width) for p in stacked]
        terms = np.concatenate(stacked, axis=0)
        if terms.shape[0] == 0:
            return np.zeros(width)
        return np.cumsum(terms, axis=0)[-1].copy()
    terms = np.concatenate(stacked)
    if terms.size == 0:
        return 0.0
    return float(np.cumsum(terms)[-1])


def ordered_max(contributions: Sequence[Any]) -> float | np.ndarray:
    parts = [np.atleast_1d(np.asarray(c, dtype=np.float64)) for c in contributions]
    if parts[0].ndim == 2:
        return np.max(np.concatenate(parts, axis=0), axis=0)
    values = np.concatenate(parts)
    if values.size == 0:
        return float("-inf")
    return float(np.max(values))


@dataclass
class Message:
    src: int
    dst: int
    tag: str
    payload: bytes
    sent_at: Fraction
    arrival: Fraction


@dataclass
class RankState:
    index: int
    status: RankStatus = RankStatus.alive
    volatile: Any = field(default_factory=dict)
    incarnation: int = 0
    failed_at: Fraction | None = None


class CollectiveHandle:
    """Pending nonblocking collective. `wait()` exactly once; `test()` any number of times."""

    def __init__(
        self,
        cluster: SimCluster,
        *,
        handle_id: int,
        op: CollectiveOp,
        participants: list[int],
        incarnations: list[int],
        value: Any,
        issued_at: Fraction,
        completion_time: Fraction,
    ) -> None:
        self._cluster = cluster
        self.id = handle_id
        self.op = op
        self.participants = participants
        self.incarnations = incarnations
        self.value = value
        self.issued_at = issued_at
        self.completion_time = completion_time
        self.waited = False

    @property
    def state(self) -> str:
        return "complete" if self._cluster.clock >= self.completion_time else "pending"

    def test(self) -> bool:
        return self._cluster.clock >= self.completion_time

    def wait(self) -> Any:
        if self.waited:
            raise UsageError(f"collective handle {self.id} already waited")
        self.waited = True
        return self._cluster._complete(self)


class SimCluster:
    def __init__(self, spec: ClusterSpec, seed: int) -> None:
        self.spec = spec
        self.seed = seed
        self.n_ranks = spec.n_ranks
        self.clock = Fraction(0)
        self.rng = np.random.default_rng(seed)
        self.ranks = [RankState(index) for index in range(spec.n_ranks)]
        self.memory = MemoryRegistry()
        self.ledger: list[dict[str, Any]] = []
        self.injector: FaultInjector | None = None
        self.lflr = None
        self._queue: list[tuple[Fraction, int, Callable[[], None], str]] = []
        self._seq = itertools.count()
        self._handle_ids = itertools.count(1)
        self._channels: dict[tuple[int, int, str], deque[Message]] = defaultdict(deque)
        self._kill_hooks: list[Callable[[int], None]] = []
        self._respawn_hooks: list[Callable[[int], None]] = []

    # -- clock and events --------------------------------------------------
    def schedule(self, when: Fraction, action: Callable[[], None], label: str = "event") -> None:
        when = as_time(when)
        if when < self.clock:
            raise UsageError(f"cannot schedule {label} in the past ({when} < {self.clock})")
        heapq.heappush(self._queue, (when, next(self._seq), action, label))

    def advance_to(self, when: Fraction) -> None:
        when = as_time(when)
        while self._queue and self._queue[0][0] <= when:
            due, _, action, _ = heapq.heappop(self._queue)
            self.clock = max(self.clock, due)
            action()
        self.clock = max(self.clock, when)

    def compute(self, cost: Any) -> None:
        """Charge local computation time. Ranks compute concurrently."""
        self.advance_to(self.clock + as_time(cost))

    def next_event_time(self) -> Fraction | None:
        return self._queue[0][0] if self._queue else None

    # -- ledger ----------------------------------------------------------
    def record(self, kind: str, **fields: Any) -> dict[str, Any]:
        entry = {"seq": len(self.ledger), "time": str(self.clock), "kind": kind, **fields}
        self.ledger.append(entry)
        return entry

    def ledger_entries(self, kinds: Iterable[str] | None = None) -> list[dict[str, Any]]:
        if kinds is None:
            return list(self.ledger)
        wanted = set(kinds)
        return [entry for entry in self.ledger if entry["kind"] in wanted]

    def ledger_digest(self, kinds: Iterable[str] | None = None) -> str:
        payload = json.dumps(self.ledger_entries(kinds), sort_keys=True, separators=(",", ":"), default=str)
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()

    # -- ranks -------------------------------------------------------------
    def _check_rank(self, rank: int) -> RankState:
        if not 0 <= rank < self.n_ranks:
            raise UsageError(f"rank {rank} outside 0..{self.n_ranks - 1}")
        return self.ranks[rank]

    def status(self, rank: int) -> RankStatus:
        return self._check_rank(rank).status

    def is_alive(self, rank: int) -> bool:
        return self._check_rank(rank).status is not RankStatus.failed

    def alive_ranks(self) -> list[int]:
        return [state.index for state in self.ranks if state.status is not RankStatus.failed]

    def failed_ranks(self) -> list[int]:
        return [state.index for state in self.ranks if state.status is RankStatus.failed]

    def volatile(self, rank: int) -> Any:
        return self._check_rank(rank).volatile

    def set_volatile(self, rank: int, state: Any) -> None:
        rank_state = self._check_rank(rank)
        if rank_state.status is RankStatus.failed:
            raise RankFailure([rank], operation="set_volatile")
        rank_state.volatile = state

    def add_kill_hook(self, hook: Callable[[int], None]) -> None:
        self._kill_hooks.append(hook)

    def add_respawn_hook(self, hook: Callable[[int], None]) -> None:
        self._respawn_hooks.append(hook)

    def kill_rank(self, rank: int, at_time: Any = None) -> None:
        state = self._check_rank(rank)
        if at_time is not None and as_time(at_time) > self.clock:
            self.schedule(as_time(at_time), lambda: self._scheduled_kill(rank), f"kill rank {rank}")
            self.record("kill_scheduled", rank=rank, at=str(as_time(at_time)))
            return
        if state.status is RankStatus.failed:
            raise UsageError(f"rank {rank} is already failed")
        self._kill(rank)

    def _scheduled_kill(self, rank: int) -> None:
        if self.ranks[rank].status is RankStatus.failed:
            self.record("kill_ignored", rank=rank, reason="already failed")
            return
        self._kill(rank)

    def _kill(self, rank: int) -> None:
        state = self.ranks[rank]
        state.status = RankStatus.failed
        state.volatile = {}
        state.failed_at = self.clock
        dropped = 0
        for (src, dst, _), queue in self._channels.items():
            if rank in (src, dst):
                dropped += len(queue)
                queue.clear()
        regions = self.memory.retire_rank(rank)
        self.record("rank_kill", rank=rank, dropped_messages=dropped, retired_regions=regions)
        logger.info("rank %s failed at t=%s (dropped %s messages)", rank, self.clock, dropped)
        for hook in self._kill_hooks:
            hook(rank)

    def respawn_rank(self, rank: int) -> RankStatus:
        state = self._check_rank(rank)
        if state.status is not RankStatus.failed:
            raise UsageError(f"rank {rank} is not failed (status={state.status.value})")
        state.status = RankStatus.respawned
        state.volatile = {}
        state.incarnation += 1
        self.record("rank_respawn", rank=rank, incarnation=state.incarnation)
        logger.info("rank %s respawned at t=%s", rank, self.clock)
        for hook in self._respawn_hooks:
            hook(rank)
        return state.status

    def _abort(self, failed: list[int], operation: str) -> RankFailure:
        survivors = self.alive_ranks()
        self.record("failure_notice", operation=operation, failed=failed, notified=survivors)
        logger.warning("%s aborted: failed ranks %s", operation, failed)
        return RankFailure(failed, operation=operation)

    # -- collectives -------------------------------------------------------
    def _collective_latency(self, participants: int) -> Fraction:
        jitter: JitterModel = self.spec.jitter
        if jitter.distribution is JitterKind.none:
            return jitter.base_latency
        if jitter.distribution is JitterKind.uniform:
            draws = self.rng.uniform(jitter.lo, jitter.hi, size=participants)
        else:
            draws = self.rng.lognormal(jitter.mu, jitter.sigma, size=participants)
        return jitter.base_latency + quantize(float(draws.max()))

    def iallreduce(self, op: CollectiveOp, contributions: Sequence[Any] | None = None) -> CollectiveHandle:
        op = CollectiveOp(op)
        failed = self.failed_ranks()
        if failed:
            raise self._abort(failed, op.value)
        participants = list(range(self.n_ranks))
        if op is CollectiveOp.barrier:
            value = None
        else:
            if contributions is None or len(contributions) != len(participants):
                got = None if contributions is None else len(contributions)
                raise UsageError(f"{op.value} needs one contribution per rank ({len(participants)}), got {got}")
            value = ordered_sum(contributions) if op is CollectiveOp.sum else ordered_max(contributions)
        self.compute(self.spec.issue_cost)
        latency = self._collective_latency(len(participants))
        handle = CollectiveHandle(
            self,
            handle_id=next(self._handle_ids),
            op=op,
            participants=participants,
            incarnations=[self.ranks[r].incarnation for r in participants],
            value=value,
            issued_at=self.clock,
            completion_time=self.clock + latency,
        )
        self.record("collective_issue", handle=handle.id, op=op.value, latency=str(latency))
        return handle

    def _complete(self, handle: CollectiveHandle) -> Any:
        self.advance_to(max(self.clock, handle.completion_time))
        failed = [
            rank
            for rank, incarnation in zip(handle.participants, handle.incarnations)
            if self.ranks[rank].status is RankStatus.failed or self.ranks[rank].incarnation != incarnation
        ]
        if failed:
            raise self._abort(failed, handle.op.value)
        self.record("collective_complete", handle=handle.id, op=handle.op.value)
        value = handle.value
        return value.copy() if isinstance(value, np.ndarray) else value

    def allreduce(self, op: CollectiveOp, contributions: Sequence[Any] | None = None) -> Any:
        return self.iallreduce(op, contributions).wait()

    def allreduce_sum(self, contributions: Sequence[Any]) -> Any:
        return self.allreduce(CollectiveOp.sum, contributions)

    def iallreduce_sum(self, contributions: Sequence[Any]) -> CollectiveHandle:
        return self.iallreduce(CollectiveOp.sum, contributions)

    def allreduce_max(self, contributions: Sequence[Any]) -> Any:
        return self.allreduce(CollectiveOp.max, contributions)

    def barrier(self) -> None:
        self.allreduce(CollectiveOp.barrier)

    # -- point to point ----------------------------------------------------
    def send(self, src: int, dst: int, payload: bytes, *, tag: str = "p2p") -> Message:
        for rank in (src, dst):
            if self._check_rank(rank).status is RankStatus.failed:
                raise self._abort([rank], "send")
        message = Message(src, dst, tag, bytes(payload), self.clock, self.clock + self.spec.p2p_latency)
        self._channels[(src, dst, tag)].append(message)
        self.record("send", src=src, dst=dst, tag=tag, nbytes=len(message.payload))
        return message

    def recv(self, src: int, dst: int, *, tag: str = "p2p") -> bytes:
        """Block until the next message on (src, dst, tag) arrives."""
        queue = self._channels[(src, dst, tag)]
        while True:
            for rank in (src, dst):
                if self._check_rank(rank).status is RankStatus.failed:
                    raise self._abort([rank], "recv")
            if queue:
                break
            upcoming = self.next_event_time()
            if upcoming is None:
                raise SimulationDeadlock(
                    f"recv on rank {dst} from rank {src} (tag={tag!r}) has no message in flight",
                )
            self.advance_to(upcoming)
        self.advance_to(max(self.clock, queue[0].arrival))
        for rank in (src, dst):
            if self.ranks[rank].status is RankStatus.failed:
                raise self._abort([rank], "recv")
        message = queue.popleft()
        self.record("recv", src=src, dst=dst, tag=tag, nbytes=len(message.payload))
        return message.payload

    def cancel(self, tag: str) -> int:
        dropped = 0
        for (_, _, channel_tag), queue in self._channels.items():
            if channel_tag == tag:
                dropped += len(queue)
                queue.clear()
        self.record("cancel", tag=tag, dropped=dropped)
        return dropped

    def pending_messages(self, tag: str | None = None) -> int:
        return sum(len(q) for (_, _, t), q in self._channels.items() if tag is None or t == tag)

    # -- fault hooks -------------------------------------------------------
    def reach(self, point: str) -> None:
        """Announce a named program point to the attached fault injector."""
        if self.injector is not None:
            self.injector.on_point(self, point)


def spawn_from_spec(spec: ClusterSpec, seed: int) -> SimCluster:
    cluster = SimCluster(spec, seed)
    logger.debug("spawned cluster n_ranks=%s seed=%s", spec.n_ranks, seed)
    return cluster


def spawn_cluster(n_ranks: int, seed: int, jitter: JitterModel | None = None, **costs: Any) -> SimCluster:
    if n_ranks < 1:
        raise ConfigurationError(f"n_ranks must be >= 1, got {n_ranks}")
    spec = ClusterSpec(n_ranks=n_ranks, jitter=jitter or JitterModel(), **costs)
    return spawn_from_spec(spec, seed)
