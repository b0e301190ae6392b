from __future__ import annotations

import fnmatch
import hashlib
import json
import logging
from enum import Enum
from fractions import Fraction
from typing import Any, Iterable

import numpy as np

from faultsim.errors import ConfigurationError, FaultPlanError
from faultsim.schemas import (
    ExplicitFaults,
    FaultEventSpec,
    FaultKind,
    FaultPlan,
    FaultSpec,
    PointCampaign,
    RandomCampaign,
    RankStatus,
    RegionKind,
)
from faultsim.services.sim_runtime import SimCluster, quantize
from faultsim.services.srp_memory import RELIABLE_LABELS, float_bits

logger = logging.getLogger(__name__)

PLAN_STREAM = 0
RESOLVE_STREAM = 1


class EventStatus(str, Enum):
    pending = "pending"
    injected = "injected"
    skipped = "skipped"


def _stream(seed: int, key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(key,)))


def _draw_bit(rng: np.random.Generator, bit_range: tuple[int, int]) -> int:
    lo, hi = bit_range
    if not 0 <= lo <= hi <= 63:
        raise ConfigurationError(f"bit_range must satisfy 0 <= lo <= hi <= 63, got {bit_range}")
    return int(rng.integers(lo, hi + 1))


def build_plan(spec: FaultSpec, seed: int) -> FaultPlan:
    """Expand a generator into a concrete event list. Same (spec, seed) gives the same plan."""
    if isinstance(spec, ExplicitFaults):
        return FaultPlan(seed=seed, generator=spec, events=list(spec.events))

    rng = _stream(seed, PLAN_STREAM)
    events: list[FaultEventSpec] = []

    if isinstance(spec, RandomCampaign):
        if spec.rate < 0:
            raise ConfigurationError(f"fault rate must be >= 0, got {spec.rate}")
        if spec.kill_fraction > 0 and not spec.ranks:
            raise ConfigurationError("random campaign with kill_fraction > 0 needs an explicit 'ranks' list")
        if spec.rate == 0 or spec.horizon == 0:
            return FaultPlan(seed=seed, generator=spec, events=[])
        now = Fraction(0)
        while True:
            now += quantize(float(rng.exponential(1.0 / spec.rate)))
            if now > spec.horizon:
                break
            kill = spec.kill_fraction > 0 and float(rng.random()) < spec.kill_fraction
            rank = int(rng.choice(spec.ranks)) if spec.ranks else None
            if kill:
                events.append(FaultEventSpec(kind=FaultKind.rank_kill, time=now, rank=rank))
            else:
                events.append(
                    FaultEventSpec(
                        kind=FaultKind.bit_flip,
                        time=now,
                        rank=rank,
                        region=spec.region,
                        bit_index=_draw_bit(rng, spec.bit_range),
                    ),
                )
    elif isinstance(spec, PointCampaign):
        for window in range(spec.count):
            occurrence = window * spec.every + 1 + int(rng.integers(spec.every))
            rank = int(rng.choice(spec.ranks)) if spec.ranks else None
            events.append(
                FaultEventSpec(
                    kind=FaultKind.bit_flip,
                    point=spec.point,
                    occurrence=occurrence,
                    rank=rank,
                    region=spec.region,
                    bit_index=_draw_bit(rng, spec.bit_range),
                ),
            )
    else:
        raise ConfigurationError(f"unknown fault generator {type(spec).__name__}")

    logger.debug("built fault plan seed=%s events=%s", seed, len(events))
    return FaultPlan(seed=seed, generator=spec, events=events)


def validate_plan(plan: FaultPlan, reliable_labels: Iterable[str] = RELIABLE_LABELS) -> None:
    """Reject plans that name a reliable region by label."""
    catalog = tuple(reliable_labels)
    for index, event in enumerate(plan.events):
        if event.kind is not FaultKind.bit_flip or not isinstance(event.region, str):
            continue
        for pattern in catalog:
            if fnmatch.fnmatchcase(event.region, pattern):
                raise FaultPlanError(
                    {
                        "message": f"fault event {index} targets reliable region {event.region!r}",
                        "event": index,
                        "reliable_pattern": pattern,
                    },
                )


class FaultInjector:
    def __init__(self, plan: FaultPlan, *, reliable_labels: Iterable[str] = RELIABLE_LABELS) -> None:
        validate_plan(plan, reliable_labels)
        self.plan = plan
        self.rng = _stream(plan.seed, RESOLVE_STREAM)
        self.status = [EventStatus.pending for _ in plan.events]
        self.ledger: list[dict[str, Any]] = []
        self._point_counts = [0 for _ in plan.events]

    def attach(self, cluster: SimCluster) -> FaultInjector:
        cluster.injector = self
        times = sorted({event.time for event in self.plan.events if event.time is not None})
        for when in times:
            if when <= cluster.clock:
                self.apply_due_events(cluster, cluster.clock)
            else:
                cluster.schedule(when, lambda when=when: self.apply_due_events(cluster, when), "fault")
        return self

    # -- triggers ----------------------------------------------------------
    def apply_due_events(self, cluster: SimCluster, now: Fraction) -> list[dict[str, Any]]:
        fired = []
        due = [
            index
            for index, event in enumerate(self.plan.events)
            if event.time is not None and event.time <= now and self.status[index] is EventStatus.pending
        ]
        due.sort(key=lambda index: (self.plan.events[index].time, index))
        for index in due:
            fired.append(self._fire(cluster, index))
        return fired

    def on_point(self, cluster: SimCluster, point: str) -> list[dict[str, Any]]:
        fired = []
        for index, event in enumerate(self.plan.events):
            if event.point is None or self.status[index] is not EventStatus.pending:
                continue
            if not fnmatch.fnmatchcase(point, event.point):
                continue
            self._point_counts[index] += 1
            if self._point_counts[index] == event.occurrence:
                fired.append(self._fire(cluster, index, point=point))
        return fired

    def finalize(self, cluster: SimCluster | None = None) -> None:
        for index, state in enumerate(self.status):
            if state is EventStatus.pending:
                self._settle(cluster, index, EventStatus.skipped, {"reason": "not reached"})

    # -- injection ---------------------------------------------------------
    def _settle(
        self,
        cluster: SimCluster | None,
        index: int,
        status: EventStatus,
        fields: dict[str, Any],
    ) -> dict[str, Any]:
        event = self.plan.events[index]
        self.status[index] = status
        entry = {"event": index, "status": status.value, "fault": event.kind.value, **fields}
        if cluster is not None:
            entry["time"] = str(cluster.clock)
            cluster.record("fault", **entry)
        self.ledger.append(entry)
        if status is EventStatus.skipped:
            logger.debug("fault event %s skipped: %s", index, fields.get("reason"))
        return entry

    def _fire(self, cluster: SimCluster, index: int, *, point: str | None = None) -> dict[str, Any]:
        event = self.plan.events[index]
        origin = {"point": point} if point is not None else {}
        if event.kind is FaultKind.rank_kill:
            if event.rank >= cluster.n_ranks:
                return self._settle(cluster, index, EventStatus.skipped, {"reason": "rank out of range", **origin})
            if cluster.status(event.rank) is RankStatus.failed:
                return self._settle(cluster, index, EventStatus.skipped, {"reason": "rank already failed", **origin})
            cluster.kill_rank(event.rank)
            return self._settle(cluster, index, EventStatus.injected, {"rank": event.rank, **origin})
        return self._flip(cluster, index, event, origin)

    def _candidates(self, cluster: SimCluster, event: FaultEventSpec) -> list:
        ranks = [event.rank] if event.rank is not None else cluster.alive_ranks()
        regions = []
        for rank in ranks:
            if rank >= cluster.n_ranks or cluster.status(rank) is RankStatus.failed:
                continue
            pattern = event.region if isinstance(event.region, str) else None
            regions.extend(
                cluster.memory.live_regions(kind=RegionKind.unreliable, rank=rank, pattern=pattern),
            )
        return sorted(regions, key=lambda region: region.region_id)

    def _flip(self, cluster: SimCluster, index: int, event: FaultEventSpec, origin: dict) -> dict[str, Any]:
        if isinstance(event.region, int):
            region = cluster.memory.get(event.region)
            if region is None:
                return self._settle(cluster, index, EventStatus.skipped, {"reason": "region not live", **origin})
            if region.kind is RegionKind.reliable:
                raise FaultPlanError(
                    {"message": f"fault event {index} targets reliable region {region.region_id}", "event": index},
                )
            if event.rank is not None and region.owner_rank != event.rank:
                return self._settle(
                    cluster, index, EventStatus.skipped, {"reason": "region not owned by rank", **origin},
                )
            if cluster.status(region.owner_rank) is RankStatus.failed:
                return self._settle(cluster, index, EventStatus.skipped, {"reason": "owner failed", **origin})
            candidates = [region]
        else:
            candidates = self._candidates(cluster, event)
            if not candidates:
                return self._settle(
                    cluster, index, EventStatus.skipped, {"reason": "no eligible region", **origin},
                )

        if event.element_index is None:
            total = sum(region.length for region in candidates)
            if total == 0:
                return self._settle(cluster, index, EventStatus.skipped, {"reason": "empty region", **origin})
            offset = int(self.rng.integers(total))
            for region in candidates:
                if offset < region.length:
                    break
                offset -= region.length
            element = offset
        else:
            # newest matching region, i.e. the most recently computed vector
            region = candidates[-1]
            element = event.element_index
            if element >= region.length:
                return self._settle(
                    cluster,
                    index,
                    EventStatus.skipped,
                    {"reason": "element out of bounds", "region": region.region_id, **origin},
                )

        bit = event.bit_index
        if bit is None:
            lo, hi = event.bit_range
            bit = int(self.rng.integers(lo, hi + 1))

        before, after = region.inject_flip(element, bit)
        return self._settle(
            cluster,
            index,
            EventStatus.injected,
            {
                "rank": region.owner_rank,
                "region": region.region_id,
                "label": region.label,
                "element": element,
                "bit": bit,
                "before": float_bits(before),
                "after": float_bits(after),
                **origin,
            },
        )

    # -- accounting --------------------------------------------------------
    @property
    def injected(self) -> int:
        return sum(1 for state in self.status if state is EventStatus.injected)

    @property
    def skipped(self) -> int:
        return sum(1 for state in self.status if state is EventStatus.skipped)

    def ledger_digest(self) -> str:
        payload = json.dumps(self.ledger, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()
