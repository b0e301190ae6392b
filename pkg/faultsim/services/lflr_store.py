"""Neighbour-replicated persistent store and the local recovery protocol.

Each persisted entry lives on its owner rank and is copied to the `neighbors`
nearest ranks on each side of a ring. A failed rank is respawned, pulls its
entries back from surviving holders and runs its registered recovery callback.
Only the failed rank and the holders/neighbours it talks to take part.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from fractions import Fraction
from types import MappingProxyType
from typing import Any, Callable, Iterable, Mapping

from faultsim.errors import ConfigurationError, RankFailure, UnrecoverableFailure, UsageError
from faultsim.schemas import RankStatus, RecoveryReport, as_time
from faultsim.services.sim_runtime import SimCluster

logger = logging.getLogger(__name__)

PERSIST_TAG = "lflr.persist"
RECOVERY_TAG = "lflr.recovery"


@dataclass(frozen=True)
class PersistentEntry:
    owner_rank: int
    key: str
    blob: bytes
    version: int


@dataclass
class RecoveryContext:
    rank: int
    failed_at: Fraction
    restored_entries: Mapping[str, PersistentEntry]
    neighbor_entries: Mapping[int, Mapping[str, PersistentEntry]]
    _fetch: Callable[[int, str], bytes] = field(repr=False)

    def fetch(self, neighbor: int, name: str) -> bytes:
        """Call a service registered on a surviving neighbour and return its bytes."""
        return self._fetch(neighbor, name)


RecoveryCallback = Callable[[RecoveryContext], Any]
ServiceHandler = Callable[[], bytes]


class LflrStore:
    def __init__(self, cluster: SimCluster, *, neighbors: int = 1, replication_latency: Any = None) -> None:
        if neighbors < 1:
            raise ConfigurationError(f"lflr neighbors must be >= 1, got {neighbors}")
        self.cluster = cluster
        self.neighbors = neighbors
        try:
            self.replication_latency = (
                cluster.spec.p2p_latency if replication_latency is None else as_time(replication_latency)
            )
        except ValueError as exc:
            raise ConfigurationError(f"invalid replication latency: {exc}") from exc
        self.degraded: set[tuple[int, str]] = set()
        self.reports: list[RecoveryReport] = []
        self._local: list[dict[str, PersistentEntry]] = [{} for _ in range(cluster.n_ranks)]
        self._replicas: list[dict[tuple[int, str], PersistentEntry]] = [{} for _ in range(cluster.n_ranks)]
        self._catalog: list[set[str]] = [set() for _ in range(cluster.n_ranks)]
        self._callbacks: dict[int, RecoveryCallback] = {}
        self._services: dict[tuple[int, str], ServiceHandler] = {}
        self._recovery_started: dict[int, Fraction] = {}
        cluster.lflr = self
        cluster.add_kill_hook(self._on_kill)
        cluster.add_respawn_hook(self._on_respawn)

    # -- topology ----------------------------------------------------------
    def replica_holders(self, rank: int) -> list[int]:
        n = self.cluster.n_ranks
        holders: list[int] = []
        for distance in range(1, self.neighbors + 1):
            for candidate in ((rank - distance) % n, (rank + distance) % n):
                if candidate != rank and candidate not in holders:
                    holders.append(candidate)
        return holders

    def neighbor_ranks(self, rank: int) -> list[int]:
        return self.replica_holders(rank)

    # -- registration ------------------------------------------------------
    def register_recovery(self, rank: int, callback: RecoveryCallback) -> None:
        self.cluster._check_rank(rank)
        if rank in self._callbacks:
            raise UsageError(f"rank {rank} already has a recovery callback")
        self._callbacks[rank] = callback

    def register_service(self, rank: int, name: str, handler: ServiceHandler) -> None:
        self.cluster._check_rank(rank)
        self._services[(rank, name)] = handler

    # -- persistence -------------------------------------------------------
    def entry(self, rank: int, key: str) -> PersistentEntry | None:
        return self._local[rank].get(key)

    def replica(self, holder: int, owner: int, key: str) -> PersistentEntry | None:
        return self._replicas[holder].get((owner, key))

    def persist(self, rank: int, key: str, blob: bytes) -> int:
        return self.persist_many([(rank, key, blob)])[0]

    def persist_many(self, items: Iterable[tuple[int, str, bytes]]) -> list[int]:
        """Persist several entries concurrently; one replication latency for the batch.

        A replica only commits if its owner is still alive when the copy lands,
        so a failure during replication leaves the previous version visible.
        """
        cluster = self.cluster
        staged: list[tuple[PersistentEntry, list[int]]] = []
        for rank, key, blob in items:
            if not cluster.is_alive(rank):
                raise RankFailure([rank], operation="persist")
            previous = self._local[rank].get(key)
            entry = PersistentEntry(rank, key, bytes(blob), (previous.version if previous else 0) + 1)
            self._local[rank][key] = entry
            targets = []
            for holder in self.replica_holders(rank):
                if cluster.is_alive(holder):
                    cluster.send(rank, holder, entry.blob, tag=PERSIST_TAG)
                    targets.append(holder)
                else:
                    self._mark_degraded(rank, key, holder)
            staged.append((entry, targets))

        if staged:
            cluster.compute(self.replication_latency)

        versions = []
        for entry, targets in staged:
            versions.append(entry.version)
            if not cluster.is_alive(entry.owner_rank):
                cluster.record("persist_aborted", rank=entry.owner_rank, key=entry.key, version=entry.version)
                continue
            committed = 0
            for holder in targets:
                if not cluster.is_alive(holder):
                    self._mark_degraded(entry.owner_rank, entry.key, holder)
                    continue
                cluster.recv(entry.owner_rank, holder, tag=PERSIST_TAG)
                self._replicas[holder][(entry.owner_rank, entry.key)] = entry
                committed += 1
            self._catalog[entry.owner_rank].add(entry.key)
            cluster.record(
                "persist_commit",
                rank=entry.owner_rank,
                key=entry.key,
                version=entry.version,
                replicas=committed,
            )
        return versions

    def _mark_degraded(self, owner: int, key: str, holder: int) -> None:
        self.degraded.add((owner, key))
        self.cluster.record("persist_degraded", rank=owner, key=key, holder=holder)
        logger.warning("degraded redundancy for rank %s key %s (holder %s down)", owner, key, holder)

    # -- failure handling --------------------------------------------------
    def _on_kill(self, rank: int) -> None:
        self._local[rank] = {}
        self._replicas[rank] = {}

    def _surviving_replica(self, owner: int, key: str) -> tuple[int, PersistentEntry] | None:
        for holder in self.replica_holders(owner):
            if not self.cluster.is_alive(holder):
                continue
            entry = self._replicas[holder].get((owner, key))
            if entry is not None:
                return holder, entry
        return None

    def recover(self, rank: int) -> RecoveryReport:
        cluster = self.cluster
        if cluster.status(rank) is not RankStatus.failed:
            raise UsageError(f"rank {rank} is not failed")
        if rank not in self._callbacks:
            raise UnrecoverableFailure(f"rank {rank} has no registered recovery callback")
        for key in sorted(self._catalog[rank]):
            if self._surviving_replica(rank, key) is None:
                raise UnrecoverableFailure(
                    {"message": f"all replicas of {key!r} owned by rank {rank} were lost", "rank": rank, "key": key},
                )
        self._recovery_started[rank] = cluster.clock
        cluster.respawn_rank(rank)
        return self.reports[-1]

    def _on_respawn(self, rank: int) -> None:
        cluster = self.cluster
        callback = self._callbacks.get(rank)
        if callback is None:
            raise UnrecoverableFailure(f"rank {rank} has no registered recovery callback")
        started = self._recovery_started.pop(rank, cluster.clock)
        failed_at = cluster.ranks[rank].failed_at or cluster.clock
        involved = {rank}
        transferred = 0

        restored: dict[str, PersistentEntry] = {}
        for key in sorted(self._catalog[rank]):
            found = self._surviving_replica(rank, key)
            if found is None:
                raise UnrecoverableFailure(f"all replicas of {key!r} owned by rank {rank} were lost")
            holder, entry = found
            cluster.send(holder, rank, entry.blob, tag=RECOVERY_TAG)
            cluster.recv(holder, rank, tag=RECOVERY_TAG)
            restored[key] = entry
            transferred += len(entry.blob)
            involved.add(holder)
        self._local[rank] = dict(restored)

        neighbor_entries: dict[int, Mapping[str, PersistentEntry]] = {}
        for owner in range(cluster.n_ranks):
            if owner == rank or not cluster.is_alive(owner) or rank not in self.replica_holders(owner):
                continue
            entries = dict(sorted(self._local[owner].items()))
            for key, entry in entries.items():
                cluster.send(owner, rank, entry.blob, tag=RECOVERY_TAG)
                cluster.recv(owner, rank, tag=RECOVERY_TAG)
                self._replicas[rank][(owner, key)] = entry
                transferred += len(entry.blob)
            involved.add(owner)
            neighbor_entries[owner] = MappingProxyType(entries)

        def fetch(neighbor: int, name: str) -> bytes:
            nonlocal transferred
            handler = self._services.get((neighbor, name))
            if handler is None or not cluster.is_alive(neighbor):
                raise UnrecoverableFailure(f"service {name!r} unavailable on rank {neighbor}")
            payload = bytes(handler())
            cluster.send(neighbor, rank, payload, tag=RECOVERY_TAG)
            cluster.recv(neighbor, rank, tag=RECOVERY_TAG)
            transferred += len(payload)
            involved.add(neighbor)
            return payload

        context = RecoveryContext(
            rank=rank,
            failed_at=failed_at,
            restored_entries=MappingProxyType(restored),
            neighbor_entries=MappingProxyType(neighbor_entries),
            _fetch=fetch,
        )
        state = callback(context)
        cluster.ranks[rank].volatile = state

        degraded = sorted(key for owner, key in self.degraded if owner == rank)
        report = RecoveryReport(
            failed_rank=rank,
            failed_at=failed_at,
            recovered_at=cluster.clock,
            recovery_time=cluster.clock - started,
            bytes_transferred=transferred,
            ranks_involved=sorted(involved),
            keys_restored=sorted(restored),
            degraded_keys=degraded,
            recomputed_steps=int(getattr(state, "recomputed_steps", 0) or 0),
        )
        cluster.record(
            "lflr_recovered",
            rank=rank,
            keys=report.keys_restored,
            bytes=transferred,
            involved=report.ranks_involved,
        )
        logger.info(
            "rank %s recovered in %s simulated time units (%s bytes, ranks %s)",
            rank,
            report.recovery_time,
            transferred,
            report.ranks_involved,
        )
        self.reports.append(report)


def recover_protocol(cluster: SimCluster, failed_rank: int) -> RecoveryReport:
    """Respawn `failed_rank` and restore it from its neighbours' replicas."""
    store = cluster.lflr
    if store is None:
        raise UnrecoverableFailure(f"rank {failed_rank} failed and no persistent store is attached")
    return store.recover(failed_rank)
