"""Explicit 1-D heat equation on a block-distributed grid.

Each rank owns a contiguous slice of interior points and exchanges one halo
value per side per step. Subdomain state is persisted every
`persist_interval` steps; between persists each rank keeps, reliably, the
boundary values it sent to each neighbour so a failed neighbour can replay
its missed steps locally.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Callable

import numpy as np

from faultsim.errors import ConfigurationError, RankFailure, UnrecoverableFailure
from faultsim.schemas import FaultPlan, HeatConfig, HeatInitial, RecoveryReport, RegionKind
from faultsim.services.fault_injector import FaultInjector
from faultsim.services.linalg import block_bounds
from faultsim.services.lflr_store import LflrStore, RecoveryContext, recover_protocol
from faultsim.services.sim_runtime import SimCluster, spawn_cluster
from faultsim.services.srp_memory import ReliableArray, UnreliableArray, alloc

logger = logging.getLogger(__name__)

HALO_TAG = "heat.halo"
STATE_KEY = "heat.u"
SIDES = ("left", "right")

Observer = Callable[[int, np.ndarray], None]


@dataclass
class SubdomainState:
    rank: int
    start: int
    interior: UnreliableArray
    step: int
    last_persist_step: int
    halo_history: dict[str, ReliableArray]
    history_len: int = 0
    recomputed_steps: int = 0

    @property
    def values(self) -> np.ndarray:
        return self.interior.data


@dataclass
class HeatResult:
    field: np.ndarray
    steps: int
    recoveries: list[RecoveryReport] = field(default_factory=list)
    step_times: list[Fraction] = field(default_factory=list)
    elapsed: Fraction = Fraction(0)


def grid_points(config: HeatConfig) -> np.ndarray:
    return config.dx * np.arange(1, config.n_global + 1)


def initial_field(config: HeatConfig) -> np.ndarray:
    if config.initial is HeatInitial.sine:
        return np.sin(math.pi * grid_points(config) / config.length)
    values = np.zeros(config.n_global)
    if config.initial is HeatInitial.spike:
        values[config.n_global // 2] = 1.0
    return values


def step(state: SubdomainState, left_halo: float, right_halo: float, r: float) -> SubdomainState:
    """Advance one explicit step in place: u + r*(left - 2u + right)."""
    u = state.values
    padded = np.concatenate(([left_halo], u, [right_halo]))
    u[:] = u + r * (padded[:-2] - 2.0 * u + padded[2:])
    state.step += 1
    return state


def _encode_state(state: SubdomainState) -> bytes:
    return np.int64(state.step).tobytes() + state.values.tobytes()


def _decode_state(blob: bytes) -> tuple[int, np.ndarray]:
    return int(np.frombuffer(blob[:8], dtype=np.int64)[0]), np.frombuffer(blob[8:], dtype=np.float64).copy()


def _encode_history(state: SubdomainState, side: str) -> bytes:
    header = np.array([state.last_persist_step, state.history_len], dtype=np.int64).tobytes()
    return header + state.halo_history[side].data[: state.history_len].tobytes()


def _decode_history(blob: bytes) -> tuple[int, np.ndarray]:
    base, count = np.frombuffer(blob[:16], dtype=np.int64)
    return int(base), np.frombuffer(blob[16:], dtype=np.float64)[: int(count)].copy()


class HeatRun:
    def __init__(
        self,
        config: HeatConfig,
        cluster: SimCluster,
        *,
        strategy: str = "lflr",
        observer: Observer | None = None,
    ) -> None:
        if strategy not in {"lflr", "cpr", "none"}:
            raise ConfigurationError(f"unknown recovery strategy {strategy!r}")
        if config.n_global < cluster.n_ranks:
            raise ConfigurationError(
                f"n_global={config.n_global} gives some of the {cluster.n_ranks} ranks no grid points",
            )
        self.config = config
        self.cluster = cluster
        self.strategy = strategy
        self.observer = observer
        self.r = config.r
        self.bounds = [block_bounds(rank, cluster.n_ranks, config.n_global) for rank in range(cluster.n_ranks)]
        self.step_count = 0
        self.reports: list[RecoveryReport] = []
        self.step_times: list[Fraction] = []
        self.store = LflrStore(cluster, neighbors=config.lflr_neighbors) if strategy != "none" else None

        values = initial_field(config)
        for rank, (start, stop) in enumerate(self.bounds):
            cluster.set_volatile(rank, self._fresh_state(rank, values[start:stop], 0))
        if self.store is not None:
            for rank in range(cluster.n_ranks):
                self.store.register_recovery(rank, self._recovery_callback(rank))
                for side in SIDES:
                    self.store.register_service(
                        rank,
                        f"heat.halo_history.{side}",
                        lambda rank=rank, side=side: _encode_history(self.cluster.volatile(rank), side),
                    )
            self._persist_all()

    # -- state -------------------------------------------------------------
    def _fresh_state(self, rank: int, values: np.ndarray, at_step: int) -> SubdomainState:
        memory = self.cluster.memory
        interior = alloc(RegionKind.unreliable, values.size, registry=memory, rank=rank, label="heat.u")
        interior.data[:] = values
        history = {
            side: alloc(
                RegionKind.reliable,
                self.config.persist_interval,
                registry=memory,
                rank=rank,
                label=f"heat.halo_history.{side}",
            )
            for side in SIDES
        }
        return SubdomainState(
            rank=rank,
            start=self.bounds[rank][0],
            interior=interior,
            step=at_step,
            last_persist_step=at_step,
            halo_history=history,
        )

    def state(self, rank: int) -> SubdomainState:
        return self.cluster.volatile(rank)

    def field(self) -> np.ndarray:
        return np.concatenate([self.state(rank).values for rank in range(self.cluster.n_ranks)])

    @staticmethod
    def _retain(state: SubdomainState, sent_left: float, sent_right: float) -> None:
        slot = state.history_len
        state.halo_history["left"].data[slot] = sent_left
        state.halo_history["right"].data[slot] = sent_right
        state.history_len += 1

    def _boundary(self, rank: int) -> tuple[float | None, float | None]:
        left = self.config.left if rank == 0 else None
        right = self.config.right if rank == self.cluster.n_ranks - 1 else None
        return left, right

    # -- exchange and stepping ---------------------------------------------
    def _exchange(self) -> list[tuple[float, float]]:
        cluster = self.cluster
        last = cluster.n_ranks - 1
        for rank in range(cluster.n_ranks):
            u = self.state(rank).values
            if rank > 0:
                cluster.send(rank, rank - 1, u[:1].tobytes(), tag=HALO_TAG)
            if rank < last:
                cluster.send(rank, rank + 1, u[-1:].tobytes(), tag=HALO_TAG)
        halos = []
        for rank in range(cluster.n_ranks):
            left, right = self._boundary(rank)
            if left is None:
                left = float(np.frombuffer(cluster.recv(rank - 1, rank, tag=HALO_TAG), dtype=np.float64)[0])
            if right is None:
                right = float(np.frombuffer(cluster.recv(rank + 1, rank, tag=HALO_TAG), dtype=np.float64)[0])
            halos.append((left, right))
        return halos

    def run(self) -> np.ndarray:
        cluster = self.cluster
        while self.step_count < self.config.n_steps:
            self._recover_failed()
            started = cluster.clock
            try:
                halos = self._exchange()
            except RankFailure as exc:
                dropped = cluster.cancel(HALO_TAG)
                logger.info("halo exchange for step %s aborted (%s), %s messages dropped", self.step_count + 1, exc, dropped)
                continue
            if cluster.failed_ranks():
                cluster.cancel(HALO_TAG)
                continue
            sent = [(float(self.state(rank).values[0]), float(self.state(rank).values[-1])) for rank in range(cluster.n_ranks)]
            cluster.compute(cluster.spec.spmv_cost)
            for rank in cluster.alive_ranks():
                state = self.state(rank)
                self._retain(state, *sent[rank])
                step(state, *halos[rank], self.r)
            self.step_count += 1
            self.step_times.append(cluster.clock - started)
            self._recover_failed()
            if self.step_count % self.config.persist_interval == 0:
                if self.store is not None:
                    self._persist_all()
                else:
                    self._start_interval()
            if self.observer is not None:
                self.observer(self.step_count, self.field())
            cluster.reach("heat.step")
        self._recover_failed()
        return self.field()

    # -- persistence and recovery -----------------------------------------
    def _persist_all(self) -> None:
        cluster = self.cluster
        while True:
            self._recover_failed()
            items = [(rank, STATE_KEY, _encode_state(self.state(rank))) for rank in range(cluster.n_ranks)]
            self.store.persist_many(items)
            if not cluster.failed_ranks():
                break
            logger.info("rank failure during persist at step %s, retrying", self.step_count)
        self._start_interval()

    def _start_interval(self) -> None:
        for rank in range(self.cluster.n_ranks):
            state = self.state(rank)
            state.last_persist_step = state.step
            state.history_len = 0

    def _recover_failed(self) -> None:
        failed = self.cluster.failed_ranks()
        if not failed:
            return
        if self.strategy == "none":
            raise UnrecoverableFailure(f"rank(s) {failed} failed and no recovery strategy is configured")
        if self.strategy == "cpr":
            self._rollback(failed)
            return
        for rank in failed:
            self.reports.append(recover_protocol(self.cluster, rank))

    def _recovery_callback(self, rank: int) -> Callable[[RecoveryContext], SubdomainState]:
        def restore(context: RecoveryContext) -> SubdomainState:
            entry = context.restored_entries.get(STATE_KEY)
            if entry is None:
                raise UnrecoverableFailure(f"rank {rank} has no persisted heat state")
            persisted_step, values = _decode_state(entry.blob)
            state = self._fresh_state(rank, values, persisted_step)
            if self.strategy == "cpr":
                return state
            missing = self.step_count - persisted_step
            if missing <= 0:
                return state
            left, right = self._boundary(rank)
            left_values = right_values = None
            if left is None:
                left_values = self._neighbor_history(context, rank - 1, "right", persisted_step, missing)
            if right is None:
                right_values = self._neighbor_history(context, rank + 1, "left", persisted_step, missing)
            for offset in range(missing):
                u = state.values
                self._retain(state, float(u[0]), float(u[-1]))
                step(
                    state,
                    left if left_values is None else float(left_values[offset]),
                    right if right_values is None else float(right_values[offset]),
                    self.r,
                )
            self.cluster.compute(self.cluster.spec.spmv_cost * missing)
            state.recomputed_steps = missing
            logger.info("rank %s replayed steps %s..%s", rank, persisted_step + 1, self.step_count)
            return state

        return restore

    @staticmethod
    def _neighbor_history(
        context: RecoveryContext,
        neighbor: int,
        side: str,
        persisted_step: int,
        missing: int,
    ) -> np.ndarray:
        base, values = _decode_history(context.fetch(neighbor, f"heat.halo_history.{side}"))
        if base != persisted_step or values.size < missing:
            raise UnrecoverableFailure(
                {
                    "message": f"rank {neighbor} halo history covers steps {base + 1}..{base + values.size}, "
                    f"need {persisted_step + 1}..{persisted_step + missing}",
                    "rank": context.rank,
                },
            )
        return values

    def _rollback(self, failed: list[int]) -> None:
        cluster = self.cluster
        started = cluster.clock
        reports = [recover_protocol(cluster, rank) for rank in failed]
        checkpoint = self.state(failed[0]).step
        for rank in range(cluster.n_ranks):
            if rank in failed:
                continue
            entry = self.store.entry(rank, STATE_KEY)
            persisted_step, values = _decode_state(entry.blob)
            cluster.set_volatile(rank, self._fresh_state(rank, values, persisted_step))
        steps = {self.state(rank).step for rank in range(cluster.n_ranks)}
        if steps != {checkpoint}:
            raise UnrecoverableFailure(f"global checkpoint is inconsistent across ranks: steps {sorted(steps)}")
        replay = self.step_count - checkpoint
        self.step_count = checkpoint
        cluster.barrier()
        every_rank = list(range(cluster.n_ranks))
        for report in reports:
            self.reports.append(
                report.model_copy(
                    update={
                        "strategy": "cpr",
                        "ranks_involved": every_rank,
                        "recomputed_steps": replay,
                        "recovered_at": cluster.clock,
                        "recovery_time": cluster.clock - started,
                    },
                ),
            )
        logger.info("global rollback to step %s, replaying %s steps on every rank", checkpoint, replay)


def _attach(cluster: SimCluster, fault_plan: FaultPlan | None) -> FaultInjector | None:
    if fault_plan is None:
        return None
    return FaultInjector(fault_plan).attach(cluster)


def _run(
    config: HeatConfig,
    cluster: SimCluster,
    fault_plan: FaultPlan | None,
    *,
    strategy: str,
    observer: Observer | None,
) -> HeatResult:
    started = cluster.clock
    injector = _attach(cluster, fault_plan)
    run = HeatRun(config, cluster, strategy=strategy, observer=observer)
    values = run.run()
    if injector is not None:
        injector.finalize(cluster)
    return HeatResult(
        field=values,
        steps=run.step_count,
        recoveries=run.reports,
        step_times=run.step_times,
        elapsed=cluster.clock - started,
    )


def run_with_lflr(
    config: HeatConfig,
    cluster: SimCluster,
    fault_plan: FaultPlan | None = None,
    *,
    observer: Observer | None = None,
) -> HeatResult:
    """Run to `n_steps`, recovering failed ranks locally from neighbour replicas."""
    return _run(config, cluster, fault_plan, strategy="lflr", observer=observer)


def run_with_cpr(
    config: HeatConfig,
    cluster: SimCluster,
    fault_plan: FaultPlan | None = None,
    *,
    observer: Observer | None = None,
) -> HeatResult:
    """Same run, but any failure rolls every rank back to the last persist."""
    return _run(config, cluster, fault_plan, strategy="cpr", observer=observer)


def run_plain(
    config: HeatConfig,
    cluster: SimCluster,
    *,
    observer: Observer | None = None,
) -> HeatResult:
    return _run(config, cluster, None, strategy="none", observer=observer)


def steady_state_check(config: HeatConfig, n_steps: int | None = None, *, n_ranks: int = 1, seed: int = 0) -> float:
    """Max deviation from the linear steady profile after `n_steps` steps."""
    if n_steps is not None:
        config = config.model_copy(update={"n_steps": n_steps})
    result = run_plain(config, spawn_cluster(n_ranks, seed))
    x = grid_points(config)
    profile = config.left + (config.right - config.left) * x / config.length
    return float(np.max(np.abs(result.field - profile)))


def write_field_csv(path: str | Path, values: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["grid_index", "value"])
        for index, value in enumerate(values):
            writer.writerow([index, repr(float(value))])
    return path
