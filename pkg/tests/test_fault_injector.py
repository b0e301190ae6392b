from fractions import Fraction
from pathlib import Path
import sys

sys.path.append(str(Path(__file__).resolve().parents[1]))

import numpy as np
import pytest

from faultsim.errors import ConfigurationError, FaultPlanError
from faultsim.schemas import (
    ExplicitFaults,
    FaultEventSpec,
    FaultKind,
    PointCampaign,
    RandomCampaign,
    RankStatus,
    RegionKind,
)
from faultsim.services.fault_injector import EventStatus, FaultInjector, build_plan, validate_plan
from faultsim.services.sim_runtime import spawn_cluster
from faultsim.services.srp_memory import alloc


def flip_event(**fields) -> FaultEventSpec:
    fields.setdefault("kind", FaultKind.bit_flip)
    return FaultEventSpec(**fields)


def explicit(*events: FaultEventSpec, seed: int = 0):
    return build_plan(ExplicitFaults(events=list(events)), seed)


def test_random_plan_is_deterministic_and_within_horizon() -> None:
    spec = RandomCampaign(rate=0.5, horizon=100, ranks=[0, 1], bit_range=(40, 50))
    first = build_plan(spec, 11)
    second = build_plan(spec, 11)
    assert first.digest() == second.digest()
    times = [event.time for event in first.events]
    assert times == sorted(times)
    assert all(Fraction(0) < t <= Fraction(100) for t in times)
    assert all(40 <= event.bit_index <= 50 for event in first.events)
    assert build_plan(spec, 12).digest() != first.digest()


def test_negative_rate_is_a_configuration_error() -> None:
    with pytest.raises(ConfigurationError):
        build_plan(RandomCampaign(rate=-1.0, horizon=10), 0)


def test_zero_rate_gives_empty_plan() -> None:
    assert build_plan(RandomCampaign(rate=0.0, horizon=10), 0).events == []


def test_point_campaign_places_one_event_per_window() -> None:
    plan = build_plan(PointCampaign(point="arnoldi.step", count=3, every=5), 4)
    occurrences = [event.occurrence for event in plan.events]
    assert 1 <= occurrences[0] <= 5
    assert 6 <= occurrences[1] <= 10
    assert 11 <= occurrences[2] <= 15


def test_plan_targeting_reliable_label_is_rejected() -> None:
    plan = explicit(flip_event(time=1, region="krylov.hessenberg", bit_index=3))
    with pytest.raises(FaultPlanError):
        validate_plan(plan)
    with pytest.raises(FaultPlanError):
        FaultInjector(plan)


def test_region_id_of_reliable_region_fails_at_injection() -> None:
    cluster = spawn_cluster(1, seed=0)
    reliable = alloc(RegionKind.reliable, 4, registry=cluster.memory, label="control.x")
    FaultInjector(explicit(flip_event(time=1, region=reliable.region_id, bit_index=0))).attach(cluster)
    with pytest.raises(FaultPlanError):
        cluster.compute(1)


def test_out_of_bounds_and_unreached_events_are_skipped() -> None:
    cluster = spawn_cluster(1, seed=0)
    region = alloc(RegionKind.unreliable, 4, registry=cluster.memory, label="krylov.w")
    injector = FaultInjector(
        explicit(
            flip_event(time=1, region=region.region_id, element_index=10, bit_index=0),
            flip_event(time=50, region=region.region_id, bit_index=0),
        ),
    ).attach(cluster)
    cluster.compute(2)
    injector.finalize(cluster)
    assert injector.status == [EventStatus.skipped, EventStatus.skipped]
    reasons = [entry["reason"] for entry in injector.ledger]
    assert reasons == ["element out of bounds", "not reached"]
    assert region.flip_count == 0


def test_empty_region_flips_are_skipped() -> None:
    cluster = spawn_cluster(1, seed=0)
    region = alloc(RegionKind.unreliable, 0, registry=cluster.memory)
    injector = FaultInjector(explicit(flip_event(time=0, region=region.region_id, bit_index=5))).attach(cluster)
    assert injector.status == [EventStatus.skipped]


def test_timed_rank_kill_and_repeat_kill() -> None:
    cluster = spawn_cluster(3, seed=0)
    kill = FaultEventSpec(kind=FaultKind.rank_kill, time=2, rank=1)
    again = FaultEventSpec(kind=FaultKind.rank_kill, time=3, rank=1)
    injector = FaultInjector(explicit(kill, again)).attach(cluster)
    cluster.compute(1)
    assert cluster.status(1) is RankStatus.alive
    cluster.compute(5)
    assert cluster.status(1) is RankStatus.failed
    assert injector.status == [EventStatus.injected, EventStatus.skipped]


def test_point_trigger_counts_occurrences() -> None:
    cluster = spawn_cluster(1, seed=0)
    region = alloc(RegionKind.unreliable, 1, registry=cluster.memory, label="krylov.w")
    region.data[0] = 1.0
    injector = FaultInjector(
        explicit(flip_event(point="*arnoldi.step", occurrence=2, region="krylov.w", element_index=0, bit_index=63)),
    ).attach(cluster)
    cluster.reach("arnoldi.step")
    assert region.data[0] == 1.0
    cluster.reach("inner.arnoldi.step")
    assert region.data[0] == -1.0
    assert injector.ledger[0]["point"] == "inner.arnoldi.step"


def test_indexed_flip_targets_newest_matching_region() -> None:
    cluster = spawn_cluster(1, seed=0)
    older = alloc(RegionKind.unreliable, 2, registry=cluster.memory, label="krylov.w")
    newer = alloc(RegionKind.unreliable, 2, registry=cluster.memory, label="krylov.w")
    FaultInjector(explicit(flip_event(time=0, region="krylov.w", element_index=1, bit_index=0))).attach(cluster)
    assert older.flip_count == 0
    assert newer.flip_count == 1


def test_reliable_memory_never_changes_under_random_flips() -> None:
    cluster = spawn_cluster(1, seed=5)
    reliable = alloc(RegionKind.reliable, 100, registry=cluster.memory, label="control.data")
    unreliable = alloc(RegionKind.unreliable, 100, registry=cluster.memory, label="work.data")
    reliable.data[:] = np.arange(100.0)
    snapshot = reliable.data.copy()
    events = [flip_event(time=t, bit_range=(0, 63)) for t in range(1, 1001)]
    injector = FaultInjector(explicit(*events, seed=5)).attach(cluster)
    cluster.compute(1000)
    assert np.array_equal(reliable.data.view(np.uint64), snapshot.view(np.uint64))
    assert injector.injected == 1000
    assert unreliable.flip_count == 1000
    flipped = [entry for entry in injector.ledger if entry["status"] == "injected"]
    assert {entry["region"] for entry in flipped} == {unreliable.region_id}
    assert len(cluster.ledger_entries(["fault"])) == 1000


def test_same_plan_gives_same_fault_ledger() -> None:
    def run() -> str:
        cluster = spawn_cluster(2, seed=3)
        alloc(RegionKind.unreliable, 16, registry=cluster.memory, rank=0, label="a")
        alloc(RegionKind.unreliable, 16, registry=cluster.memory, rank=1, label="b")
        plan = build_plan(RandomCampaign(rate=1.0, horizon=20), 3)
        injector = FaultInjector(plan).attach(cluster)
        cluster.compute(20)
        return injector.ledger_digest()

    assert run() == run()
