from pathlib import Path
import sys

sys.path.append(str(Path(__file__).resolve().parents[1]))

import numpy as np
import pytest
import scipy.sparse as sp

from faultsim.errors import ConfigurationError, UsageError
from faultsim.schemas import RegionKind
from faultsim.services.linalg import (
    CsrMatrix,
    DistVector,
    Hessenberg,
    ReductionMode,
    axpy,
    block_bounds,
    dot,
    dots,
    hessenberg_lsq,
    laplacian_1d,
    laplacian_2d,
    norm2,
    read_matrix_market,
    residual,
    spmv,
)
from faultsim.services.sim_runtime import spawn_cluster

MATRICES = Path(__file__).resolve().parents[1] / "matrices"


def vector(n_ranks: int, values, **kwargs) -> DistVector:
    return DistVector.from_array(spawn_cluster(n_ranks, seed=0), values, **kwargs)


def test_block_bounds_cover_vector_in_order() -> None:
    bounds = [block_bounds(rank, 3, 10) for rank in range(3)]
    assert bounds == [(0, 4), (4, 7), (7, 10)]
    assert block_bounds(4, 5, 3) == (3, 3)


def test_dot_is_bit_identical_across_rank_counts() -> None:
    rng = np.random.default_rng(11)
    a = rng.standard_normal(257) * 1e4
    b = rng.standard_normal(257)
    serial = 0.0
    for left, right in zip(a, b):
        serial += float(left * right)
    for n_ranks in (1, 2, 3, 8):
        cluster = spawn_cluster(n_ranks, seed=0)
        x = DistVector.from_array(cluster, a)
        y = DistVector.from_array(cluster, b)
        assert dot(x, y) == serial


def test_nonblocking_dot_returns_handle() -> None:
    x = vector(2, [1.0, 2.0, 3.0])
    handle = dot(x, x, ReductionMode.nonblocking)
    assert handle.wait() == 14.0


def test_fused_dots_match_separate_dots() -> None:
    cluster = spawn_cluster(3, seed=0)
    rng = np.random.default_rng(5)
    x = DistVector.from_array(cluster, rng.standard_normal(20))
    y = DistVector.from_array(cluster, rng.standard_normal(20))
    z = DistVector.from_array(cluster, rng.standard_normal(20))
    fused = dots([(x, y), (x, z), (z, z)])
    assert list(fused) == [dot(x, y), dot(x, z), dot(z, z)]


def test_norm2_and_axpy() -> None:
    cluster = spawn_cluster(2, seed=0)
    x = DistVector.from_array(cluster, [3.0, 4.0])
    y = DistVector.from_array(cluster, [1.0, 1.0])
    assert norm2(x) == 5.0
    axpy(2.0, x, y)
    assert list(y.to_array()) == [7.0, 9.0]


def test_layout_mismatch_is_a_usage_error() -> None:
    cluster = spawn_cluster(2, seed=0)
    with pytest.raises(UsageError):
        dot(DistVector.from_array(cluster, [1.0, 2.0]), DistVector.from_array(cluster, [1.0, 2.0, 3.0]))


def test_spmv_matches_scipy_and_is_rank_independent() -> None:
    matrix = laplacian_2d(5, 4, shift=0.5)
    x = np.random.default_rng(2).standard_normal(20)
    results = []
    for n_ranks in (1, 3):
        cluster = spawn_cluster(n_ranks, seed=0)
        y = spmv(CsrMatrix(cluster, matrix), DistVector.from_array(cluster, x, label="krylov.v"))
        assert y.label == "krylov.v.Ax"
        results.append(y.to_array())
    np.testing.assert_allclose(results[0], matrix @ x, rtol=1e-14, atol=1e-14)
    assert np.array_equal(results[0].view(np.uint64), results[1].view(np.uint64))


def test_spmv_is_linear() -> None:
    cluster = spawn_cluster(4, seed=0)
    A = CsrMatrix(cluster, laplacian_1d(12))
    rng = np.random.default_rng(9)
    u, v = rng.integers(-5, 5, 12).astype(float), rng.integers(-5, 5, 12).astype(float)
    left = spmv(A, DistVector.from_array(cluster, 2.0 * u + 3.0 * v)).to_array()
    right = 2.0 * spmv(A, DistVector.from_array(cluster, u)).to_array() + 3.0 * spmv(
        A, DistVector.from_array(cluster, v),
    ).to_array()
    assert np.array_equal(left, right)


def test_spmv_charges_cost_and_uses_halo_messages() -> None:
    cluster = spawn_cluster(3, seed=0, spmv_cost=4)
    A = CsrMatrix(cluster, laplacian_1d(9))
    spmv(A, DistVector.from_array(cluster, np.ones(9)))
    halos = [entry for entry in cluster.ledger if entry.get("tag") == "halo"]
    assert halos
    assert cluster.pending_messages() == 0
    assert cluster.clock >= 4


def test_residual_of_exact_solution_is_zero() -> None:
    cluster = spawn_cluster(2, seed=0)
    A = CsrMatrix(cluster, laplacian_1d(6))
    ones = np.ones(6)
    r = residual(A, DistVector.from_array(cluster, laplacian_1d(6) @ ones), DistVector.from_array(cluster, ones))
    assert not r.to_array().any()


def test_matrix_must_be_square_and_finite() -> None:
    cluster = spawn_cluster(1, seed=0)
    with pytest.raises(UsageError):
        CsrMatrix(cluster, np.ones((2, 3)))
    with pytest.raises(UsageError):
        CsrMatrix(cluster, np.array([[1.0, np.nan], [0.0, 1.0]]))


def test_norm_inf_of_laplacian() -> None:
    for n_ranks in (1, 4):
        assert CsrMatrix(spawn_cluster(n_ranks, seed=0), laplacian_1d(10)).norm_inf() == 4.0


def test_norm_inf_with_empty_rows() -> None:
    matrix = sp.csr_matrix(np.array([[0.0, 0.0, 0.0], [0.0, -3.0, 1.0], [0.0, 0.0, 0.0]]))
    assert CsrMatrix(spawn_cluster(3, seed=0), matrix).norm_inf() == 4.0


def test_read_matrix_market_file() -> None:
    matrix = read_matrix_market(MATRICES / "diag10.mtx")
    assert matrix.shape == (10, 10)
    assert list(matrix.diagonal()) == [float(i) for i in range(1, 11)]


def test_missing_matrix_file_is_a_configuration_error(tmp_path) -> None:
    with pytest.raises(ConfigurationError):
        read_matrix_market(tmp_path / "absent.mtx")
    garbage = tmp_path / "garbage.mtx"
    garbage.write_text("not a matrix\n")
    with pytest.raises(ConfigurationError):
        read_matrix_market(garbage)


def test_hessenberg_lsq_single_column() -> None:
    y, est = hessenberg_lsq(np.array([[2.0], [0.0]]), 2.0)
    assert list(y) == [1.0]
    assert est == 0.0


def test_hessenberg_lsq_matches_dense_least_squares() -> None:
    rng = np.random.default_rng(21)
    j = 6
    H = np.triu(rng.standard_normal((j + 1, j)), k=-1)
    beta = 1.7
    rhs = np.zeros(j + 1)
    rhs[0] = beta
    y, est = hessenberg_lsq(H, beta)
    expected, *_ = np.linalg.lstsq(H, rhs, rcond=None)
    np.testing.assert_allclose(y, expected, rtol=1e-10, atol=1e-12)
    assert est == pytest.approx(np.linalg.norm(rhs - H @ expected), rel=1e-10, abs=1e-14)


def test_hessenberg_lsq_rejects_wrong_shape() -> None:
    with pytest.raises(UsageError):
        hessenberg_lsq(np.ones((3, 3)), 1.0)


def test_hessenberg_lives_in_reliable_memory_and_flags_breakdown() -> None:
    cluster = spawn_cluster(1, seed=0)
    hessenberg = Hessenberg(3, registry=cluster.memory, label="krylov")
    labels = {region.label for region in cluster.memory.live_regions(kind=RegionKind.reliable)}
    assert {"krylov.hessenberg", "krylov.givens"} <= labels
    assert not cluster.memory.live_regions(kind=RegionKind.unreliable)
    hessenberg.reset(1.0)
    assert hessenberg.append_column([3.0, 0.0]) == 0.0
    assert hessenberg.lucky_breakdown
    assert list(hessenberg.solve()) == [pytest.approx(1.0 / 3.0)]
    with pytest.raises(UsageError):
        hessenberg.append_column([1.0, 2.0])
