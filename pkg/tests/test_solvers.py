from pathlib import Path
import math
import sys

sys.path.append(str(Path(__file__).resolve().parents[1]))

import numpy as np
import pytest
import scipy.sparse as sp

from faultsim.errors import Diverged, FaultPlanError, PersistentCorruption, UsageError
from faultsim.schemas import (
    ExplicitFaults,
    FaultEventSpec,
    FaultKind,
    JitterKind,
    JitterModel,
    PointCampaign,
    SkepticalPolicy,
    SolverConfig,
)
from faultsim.services.fault_injector import FaultInjector, build_plan
from faultsim.services.linalg import (
    CsrMatrix,
    DistVector,
    diagonal,
    identity,
    laplacian_1d,
    laplacian_2d,
    read_matrix_market,
)
from faultsim.services.sim_runtime import spawn_cluster
from faultsim.services.solvers import (
    InnerSolve,
    fgmres,
    ft_gmres,
    gmres,
    pipelined_gmres,
    skeptical_gmres,
)
from faultsim.services.srp_memory import bits_to_float

ROOT = Path(__file__).resolve().parents[1]


def problem(matrix, rhs, n_ranks: int = 2, seed: int = 0, **cluster_kwargs):
    cluster = spawn_cluster(n_ranks, seed=seed, **cluster_kwargs)
    return cluster, CsrMatrix(cluster, matrix), DistVector.from_array(cluster, rhs, label="b")


def true_relative_residual(matrix, rhs, x: DistVector) -> float:
    return float(np.linalg.norm(rhs - matrix @ x.to_array()) / np.linalg.norm(rhs))


def scaled_problem(n_ranks: int = 2):
    # entries of A*v stay below 2 in magnitude, so flipping bit 62 always amplifies
    matrix = 0.25 * laplacian_1d(24, shift=1.0)
    rhs = np.random.default_rng(17).uniform(-1.0, 1.0, 24)
    return matrix, rhs


def arnoldi_flip(cluster, *, occurrence: int = 3, bit_index: int = 62) -> FaultInjector:
    event = FaultEventSpec(
        kind=FaultKind.bit_flip,
        point="arnoldi.step",
        occurrence=occurrence,
        rank=0,
        region="krylov.w",
        element_index=5,
        bit_index=bit_index,
    )
    return FaultInjector(build_plan(ExplicitFaults(events=[event]), 0)).attach(cluster)


def test_identity_converges_in_one_iteration() -> None:
    rhs = np.random.default_rng(1).standard_normal(10)
    _, A, b = problem(identity(10), rhs)
    x, report = gmres(A, b)
    assert report.converged
    assert report.iterations == 1
    np.testing.assert_allclose(x.to_array(), rhs, rtol=1e-14)


def test_small_diagonal_systems() -> None:
    _, A, b = problem(2.0 * identity(2), [2.0, 2.0])
    x, report = gmres(A, b)
    np.testing.assert_allclose(x.to_array(), [1.0, 1.0], rtol=1e-14)
    assert report.converged

    _, A, b = problem(diagonal([1.0, 2.0]), [1.0, 1.0])
    x, report = gmres(A, b, config=SolverConfig(tol=1e-12))
    np.testing.assert_allclose(x.to_array(), [1.0, 0.5], rtol=1e-12)
    assert report.iterations <= 2


def test_zero_rhs_returns_zero_solution() -> None:
    _, A, b = problem(laplacian_1d(6), np.zeros(6))
    x, report = gmres(A, b)
    assert report.converged
    assert report.iterations == 0
    assert report.residual_history == [0.0]
    assert not x.to_array().any()


def test_nonfinite_rhs_diverges() -> None:
    _, A, b = problem(identity(3), [1.0, np.nan, 0.0])
    with pytest.raises(Diverged):
        gmres(A, b)


def test_maxit_stops_without_convergence() -> None:
    _, A, b = problem(laplacian_1d(40), np.ones(40))
    _, report = gmres(A, b, config=SolverConfig(maxit=3, restart=30))
    assert not report.converged
    assert report.iterations == 3
    assert len(report.residual_history) == report.iterations + 1


def test_restarted_gmres_certifies_true_residual() -> None:
    matrix = laplacian_2d(6, 6, shift=0.1)
    rhs = np.ones(36)
    _, A, b = problem(matrix, rhs, n_ranks=3)
    x, report = gmres(A, b, config=SolverConfig(restart=5, tol=1e-8))
    assert report.converged
    assert report.restarts >= 1
    assert report.true_residual <= 1e-8
    assert true_relative_residual(matrix, rhs, x) <= 1.01e-8


def test_solution_is_bit_identical_across_rank_counts() -> None:
    matrix = laplacian_1d(30, shift=0.5)
    rhs = np.random.default_rng(4).standard_normal(30)
    solutions = []
    histories = []
    for n_ranks in (1, 2, 5):
        _, A, b = problem(matrix, rhs, n_ranks=n_ranks)
        x, report = gmres(A, b, config=SolverConfig(restart=10))
        solutions.append(x.to_array().view(np.uint64))
        histories.append(report.residual_history)
    assert all(np.array_equal(solutions[0], other) for other in solutions[1:])
    assert histories[0] == histories[1] == histories[2]


def test_fault_free_skeptical_matches_gmres_bitwise() -> None:
    matrix, rhs = scaled_problem()
    _, A, b = problem(matrix, rhs)
    plain, plain_report = gmres(A, b)
    _, A, b = problem(matrix, rhs)
    checked, checked_report = skeptical_gmres(A, b)
    assert np.array_equal(plain.to_array().view(np.uint64), checked.to_array().view(np.uint64))
    assert checked_report.detections == []
    assert plain_report.residual_history == checked_report.residual_history


def test_skeptical_detects_amplified_flip_and_recovers() -> None:
    matrix, rhs = scaled_problem()
    cluster, A, b = problem(matrix, rhs)
    injector = arnoldi_flip(cluster)
    config = SolverConfig(skeptical_policy=SkepticalPolicy.reject_and_restart, max_rejections=3)
    x, report = skeptical_gmres(A, b, config=config)
    after = bits_to_float(injector.ledger[0]["after"])
    assert injector.injected == 1
    assert not math.isfinite(after) or abs(after) > 1e100
    assert report.detections
    assert report.detections[0].check_name in {"finite", "norm_bound"}
    assert report.rejections == 1
    assert report.converged
    assert true_relative_residual(matrix, rhs, x) <= 1.01e-8


def test_detect_only_records_without_rejecting() -> None:
    matrix, rhs = scaled_problem()
    cluster, A, b = problem(matrix, rhs)
    arnoldi_flip(cluster)
    config = SolverConfig(skeptical_policy=SkepticalPolicy.detect_only)
    try:
        _, report = skeptical_gmres(A, b, config=config)
    except Diverged:
        return
    assert report.detections
    assert report.rejections == 0


def test_continue_policy_ends_cycle_on_nonfinite_column() -> None:
    matrix, rhs = scaled_problem()
    cluster, A, b = problem(matrix, rhs)
    arnoldi_flip(cluster)
    x, report = skeptical_gmres(A, b, config=SolverConfig(skeptical_policy=SkepticalPolicy.continue_))
    assert [(d.iteration, d.check_name) for d in report.detections] == [(3, "finite")]
    assert report.rejections == 0
    assert report.restarts >= 1
    assert report.converged
    assert true_relative_residual(matrix, rhs, x) <= 1.01e-8


def test_zero_rejection_budget_raises_persistent_corruption() -> None:
    matrix, rhs = scaled_problem()
    cluster, A, b = problem(matrix, rhs)
    arnoldi_flip(cluster)
    config = SolverConfig(skeptical_policy=SkepticalPolicy.reject_and_restart, max_rejections=0)
    with pytest.raises(PersistentCorruption):
        skeptical_gmres(A, b, config=config)


def test_unprotected_gmres_never_claims_false_convergence() -> None:
    matrix, rhs = scaled_problem()
    cluster, A, b = problem(matrix, rhs)
    arnoldi_flip(cluster)
    try:
        x, report = gmres(A, b)
    except Diverged as exc:
        assert exc.history
        return
    if report.converged:
        assert true_relative_residual(matrix, rhs, x) <= 1.01e-8


def test_ft_gmres_matches_unvalidated_fgmres_without_faults() -> None:
    matrix = laplacian_2d(8, 8)
    rhs = np.ones(64)
    inner_config = SolverConfig(restart=10, maxit=10, tol=1e-1)
    _, A, b = problem(matrix, rhs)
    x_ft, report = ft_gmres(A, b, inner_config=inner_config)
    _, A, b = problem(matrix, rhs)
    x_flex, _ = fgmres(A, b, preconditioner=InnerSolve(A, inner_config, validate=False))
    assert report.converged
    assert report.inner_rejections == 0
    assert report.inner_iterations > 0
    assert np.array_equal(x_ft.to_array().view(np.uint64), x_flex.to_array().view(np.uint64))


def test_ft_gmres_converges_under_inner_faults() -> None:
    matrix = laplacian_2d(8, 8)
    rhs = np.ones(64)
    cluster, A, b = problem(matrix, rhs)
    plan = build_plan(PointCampaign(point="inner.arnoldi.step", count=5, every=7, region="inner.krylov.*"), 3)
    injector = FaultInjector(plan).attach(cluster)
    x, report = ft_gmres(A, b)
    injector.finalize(cluster)
    assert injector.injected >= 1
    assert report.converged
    assert true_relative_residual(matrix, rhs, x) <= 1.01e-8


def test_outer_labels_are_reliable() -> None:
    cluster, A, b = problem(laplacian_1d(8), np.ones(8))
    plan = build_plan(PointCampaign(point="outer.arnoldi.step", count=1, every=1, region="outer.krylov.x"), 0)
    with pytest.raises(FaultPlanError):
        FaultInjector(plan)


def test_pipelined_tracks_synchronous_gmres_and_is_faster() -> None:
    matrix = laplacian_1d(64, shift=1.0)
    rhs = np.random.default_rng(8).uniform(-1.0, 1.0, 64)
    jitter = JitterModel(base_latency=10, distribution=JitterKind.lognormal)
    config = SolverConfig(restart=30, tol=1e-8)

    _, A, b = problem(matrix, rhs, n_ranks=16, seed=2, jitter=jitter, spmv_cost=10)
    _, sync = gmres(A, b, config=config)
    _, A, b = problem(matrix, rhs, n_ranks=16, seed=2, jitter=jitter, spmv_cost=10)
    x, piped = pipelined_gmres(A, b, config=config.model_copy(update={"pipeline_depth": 1}))

    assert sync.converged and piped.converged
    assert abs(sync.iterations - piped.iterations) <= 1
    prefix = min(len(sync.residual_history), len(piped.residual_history))
    gaps = np.abs(np.array(sync.residual_history[:prefix]) - np.array(piped.residual_history[:prefix]))
    assert gaps.max() <= 1e-10
    assert piped.simulated_elapsed < sync.simulated_elapsed
    assert true_relative_residual(matrix, rhs, x) <= 1.01e-8


def test_pipelined_requires_depth_one() -> None:
    _, A, b = problem(laplacian_1d(4), np.ones(4))
    with pytest.raises(UsageError):
        pipelined_gmres(A, b, config=SolverConfig())


def bundled_matrix(name: str):
    if name == "diag10":
        return read_matrix_market(ROOT / "matrices" / "diag10.mtx")
    return laplacian_2d(16, 16)


@pytest.mark.parametrize("name", ["laplacian16", "diag10"])
def test_fault_free_skeptical_is_bit_exact_on_bundled_matrices(name: str) -> None:
    matrix = bundled_matrix(name)
    rhs = np.ones(matrix.shape[0])
    _, A, b = problem(matrix, rhs, n_ranks=4)
    plain, plain_report = gmres(A, b)
    _, A, b = problem(matrix, rhs, n_ranks=4)
    config = SolverConfig(skeptical_policy=SkepticalPolicy.detect_only)
    checked, checked_report = skeptical_gmres(A, b, config=config)
    assert checked_report.detections == []
    assert np.array_equal(plain.to_array().view(np.uint64), checked.to_array().view(np.uint64))
    assert plain_report.residual_history == checked_report.residual_history


@pytest.mark.parametrize("name", ["laplacian16", "diag10"])
def test_fault_free_pipelined_tracks_gmres_on_bundled_matrices(name: str) -> None:
    matrix = bundled_matrix(name)
    rhs = np.ones(matrix.shape[0])
    _, A, b = problem(matrix, rhs, n_ranks=4)
    _, sync = gmres(A, b)
    _, A, b = problem(matrix, rhs, n_ranks=4)
    x, piped = pipelined_gmres(A, b, config=SolverConfig(pipeline_depth=1))
    assert sync.converged and piped.converged
    assert abs(sync.iterations - piped.iterations) <= 1
    prefix = min(len(sync.residual_history), len(piped.residual_history))
    gaps = np.abs(np.array(sync.residual_history[:prefix]) - np.array(piped.residual_history[:prefix]))
    assert gaps.max() <= 1e-10
    assert true_relative_residual(matrix, rhs, x) <= 1.01e-8


@pytest.mark.parametrize("name", ["laplacian16", "diag10"])
def test_fault_free_ft_gmres_rejects_nothing_on_bundled_matrices(name: str) -> None:
    matrix = bundled_matrix(name)
    rhs = np.ones(matrix.shape[0])
    _, A, b = problem(matrix, rhs, n_ranks=4)
    x, report = ft_gmres(A, b)
    assert report.converged
    assert report.inner_rejections == 0
    assert true_relative_residual(matrix, rhs, x) <= 1.01e-8


@pytest.mark.parametrize("occurrence", [2, 5, 9])
@pytest.mark.parametrize("bit_index", range(52, 64))
def test_exponent_and_sign_flips_are_flagged_exactly_when_they_amplify(occurrence: int, bit_index: int) -> None:
    matrix = laplacian_2d(16, 16)
    rhs = np.random.default_rng(5).uniform(-1.0, 1.0, 256)
    cluster, A, b = problem(matrix, rhs)
    injector = arnoldi_flip(cluster, occurrence=occurrence, bit_index=bit_index)
    config = SolverConfig(skeptical_policy=SkepticalPolicy.reject_and_restart, max_rejections=3)
    x, report = skeptical_gmres(A, b, config=config)
    assert injector.injected == 1
    assert report.converged
    assert true_relative_residual(matrix, rhs, x) <= 1.01e-8

    before = bits_to_float(injector.ledger[0]["before"])
    after = bits_to_float(injector.ledger[0]["after"])
    bound = config.check_tolerances.norm_growth_factor * A.norm_inf()
    flagged = [
        d for d in report.detections if d.iteration == occurrence and d.check_name in {"finite", "norm_bound"}
    ]
    if not math.isfinite(after):
        assert flagged
    elif abs(after) <= abs(before):
        # shrinking or sign-flipped entries keep every |h| below ||A||
        assert not flagged
    elif abs(after) > math.sqrt(occurrence + 1) * bound * 1.01:
        # one of the occurrence + 1 column entries carries at least |w|/sqrt(occurrence + 1)
        assert flagged
    if flagged:
        assert report.rejections >= 1


def test_ft_gmres_converges_more_often_than_gmres_under_paired_flips() -> None:
    matrix = laplacian_2d(8, 8)
    gmres_converged = ft_converged = 0
    for seed in range(100):
        rhs = np.random.default_rng(seed).uniform(-1.0, 1.0, 64)

        cluster, A, b = problem(matrix, rhs, seed=seed)
        campaign = PointCampaign(point="arnoldi.step", count=2, every=8, bit_range=(62, 62), region="krylov.*")
        FaultInjector(build_plan(campaign, seed)).attach(cluster)
        try:
            x, report = gmres(A, b)
        except Diverged:
            pass
        else:
            if report.converged and true_relative_residual(matrix, rhs, x) <= 1.01e-8:
                gmres_converged += 1

        cluster, A, b = problem(matrix, rhs, seed=seed)
        campaign = campaign.model_copy(update={"point": "inner.arnoldi.step", "region": "inner.krylov.*"})
        FaultInjector(build_plan(campaign, seed)).attach(cluster)
        x, report = ft_gmres(A, b)
        if report.converged:
            ft_converged += 1
            assert report.true_residual <= 1.01e-8
            assert true_relative_residual(matrix, rhs, x) <= 1.01e-8

    assert ft_converged > gmres_converged


def test_pipelined_is_faster_on_every_seed_at_32_ranks() -> None:
    matrix = laplacian_1d(64, shift=1.0)
    rhs = np.random.default_rng(8).uniform(-1.0, 1.0, 64)
    jitter = JitterModel(base_latency=10, distribution=JitterKind.lognormal)
    config = SolverConfig(restart=30, tol=1e-8)
    for seed in range(20):
        _, A, b = problem(matrix, rhs, n_ranks=32, seed=seed, jitter=jitter, spmv_cost=10)
        _, sync = gmres(A, b, config=config)
        _, A, b = problem(matrix, rhs, n_ranks=32, seed=seed, jitter=jitter, spmv_cost=10)
        _, piped = pipelined_gmres(A, b, config=config.model_copy(update={"pipeline_depth": 1}))
        assert sync.converged and piped.converged
        assert abs(sync.iterations - piped.iterations) <= 1
        assert piped.simulated_elapsed < sync.simulated_elapsed


def test_residual_estimate_matches_recomputed_residual() -> None:
    for seed in range(3):
        rng = np.random.default_rng(seed)
        g = rng.standard_normal((10, 10))
        matrix = sp.csr_matrix(g @ g.T + 10.0 * np.eye(10))
        rhs = rng.standard_normal(10)
        for steps in range(1, 11):
            _, A, b = problem(matrix, rhs)
            x, report = gmres(A, b, config=SolverConfig(maxit=steps, tol=1e-14))
            recomputed = true_relative_residual(matrix, rhs, x)
            assert abs(report.residual_history[-1] - recomputed) <= 1e-12
