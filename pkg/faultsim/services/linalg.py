"""Distributed vectors, row-block CSR matrices and the Hessenberg least-squares kernel.

Vectors are split into balanced contiguous blocks, one memory region per rank.
Reductions go through the cluster so that a sum is always accumulated in
global index order, independent of the rank count.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.io
import scipy.linalg
import scipy.sparse as sp

from faultsim.errors import ConfigurationError, UsageError
from faultsim.schemas import MatrixSource, MatrixSpec, RegionKind, RhsKind
from faultsim.services.sim_runtime import CollectiveHandle, SimCluster
from faultsim.services.srp_memory import MemoryRegistry, alloc, demote

logger = logging.getLogger(__name__)

HALO_TAG = "halo"


class ReductionMode(str, Enum):
    blocking = "blocking"
    nonblocking = "nonblocking"


def block_bounds(rank: int, n_ranks: int, n: int) -> tuple[int, int]:
    base, extra = divmod(n, n_ranks)
    start = rank * base + min(rank, extra)
    return start, start + base + (1 if rank < extra else 0)


class DistVector:
    def __init__(
        self,
        cluster: SimCluster,
        global_length: int,
        *,
        kind: RegionKind = RegionKind.unreliable,
        label: str = "vec",
    ) -> None:
        if global_length < 0:
            raise UsageError(f"vector length must be >= 0, got {global_length}")
        self.cluster = cluster
        self.global_length = global_length
        self.kind = RegionKind(kind)
        self.label = label
        self.bounds = [block_bounds(r, cluster.n_ranks, global_length) for r in range(cluster.n_ranks)]
        self.blocks = [
            alloc(self.kind, stop - start, registry=cluster.memory, rank=rank, label=label)
            for rank, (start, stop) in enumerate(self.bounds)
        ]

    @classmethod
    def from_array(
        cls,
        cluster: SimCluster,
        values: Sequence[float] | np.ndarray,
        *,
        kind: RegionKind = RegionKind.unreliable,
        label: str = "vec",
    ) -> DistVector:
        values = np.asarray(values, dtype=np.float64).reshape(-1)
        vector = cls(cluster, values.size, kind=kind, label=label)
        for block, (start, stop) in zip(vector.blocks, vector.bounds):
            block.data[:] = values[start:stop]
        return vector

    def local(self, rank: int) -> np.ndarray:
        return self.blocks[rank].data

    def to_array(self) -> np.ndarray:
        """Gather for inspection. Not a simulated operation."""
        if not self.blocks:
            return np.zeros(0)
        return np.concatenate([block.data for block in self.blocks])

    def check_layout(self, other: DistVector) -> None:
        if other.cluster is not self.cluster or other.global_length != self.global_length:
            raise UsageError(
                f"vector layouts differ: {self.label}[{self.global_length}] vs {other.label}[{other.global_length}]",
            )

    def release(self) -> None:
        for block in self.blocks:
            self.cluster.memory.retire(block)

    def __repr__(self) -> str:
        return f"DistVector({self.label!r}, n={self.global_length}, kind={self.kind.value})"


@dataclass(frozen=True)
class CsrBlock:
    row_start: int
    row_stop: int
    indptr: np.ndarray
    indices: np.ndarray
    data: np.ndarray

    @property
    def max_row_nnz(self) -> int:
        lengths = np.diff(self.indptr)
        return int(lengths.max()) if lengths.size else 0


class CsrMatrix:
    """Square sparse matrix distributed by row blocks, columns kept global."""

    def __init__(self, cluster: SimCluster, matrix: sp.spmatrix | sp.sparray | np.ndarray) -> None:
        csr = sp.csr_matrix(matrix, dtype=np.float64)
        if csr.shape[0] != csr.shape[1]:
            raise UsageError(f"matrix must be square, got shape {csr.shape}")
        csr.sum_duplicates()
        csr.sort_indices()
        if not np.isfinite(csr.data).all():
            raise UsageError("matrix values must be finite")
        self.cluster = cluster
        self.n = csr.shape[0]
        self.nnz = int(csr.nnz)
        self._csr = csr
        self.blocks: list[CsrBlock] = []
        for rank in range(cluster.n_ranks):
            start, stop = block_bounds(rank, cluster.n_ranks, self.n)
            rows = csr[start:stop]
            self.blocks.append(
                CsrBlock(
                    row_start=start,
                    row_stop=stop,
                    indptr=rows.indptr.astype(np.int64),
                    indices=rows.indices.astype(np.int64),
                    data=rows.data.copy(),
                ),
            )
        self._norm_inf: float | None = None

    def to_scipy(self) -> sp.csr_matrix:
        return self._csr.copy()

    def norm_inf(self) -> float:
        """Max absolute row sum, reduced across ranks (cached after the first call)."""
        if self._norm_inf is None:
            local = []
            for block in self.blocks:
                lengths = np.diff(block.indptr)
                rows = np.repeat(np.arange(lengths.size), lengths)
                sums = np.bincount(rows, weights=np.abs(block.data), minlength=lengths.size)
                local.append(float(sums.max()) if sums.size else 0.0)
            self._norm_inf = float(self.cluster.allreduce_max(local))
        return self._norm_inf


def _row_products(block: CsrBlock, xg: np.ndarray) -> np.ndarray:
    """y_i = sum_k a_ik x_k accumulated in column order within each row."""
    lengths = np.diff(block.indptr)
    y = np.zeros(lengths.size)
    for slot in range(block.max_row_nnz):
        rows = np.flatnonzero(lengths > slot)
        pos = block.indptr[rows] + slot
        y[rows] += block.data[pos] * xg[block.indices[pos]]
    return y


def spmv(A: CsrMatrix, x: DistVector, *, out: DistVector | None = None, label: str | None = None) -> DistVector:
    cluster = A.cluster
    if x.cluster is not cluster or x.global_length != A.n:
        raise UsageError(f"spmv shape mismatch: matrix n={A.n}, vector {x.label}[{x.global_length}]")
    y = out if out is not None else DistVector(cluster, A.n, kind=x.kind, label=label or f"{x.label}.Ax")
    if y is x:
        raise UsageError("spmv output must not alias its input")
    x.check_layout(y)

    starts = np.array([start for start, _ in x.bounds], dtype=np.int64)
    needs: list[dict[int, np.ndarray]] = []
    for rank, block in enumerate(A.blocks):
        remote = np.unique(block.indices[(block.indices < block.row_start) | (block.indices >= block.row_stop)])
        owners = np.searchsorted(starts, remote, side="right") - 1
        needs.append({int(owner): remote[owners == owner] for owner in np.unique(owners)})

    for rank, wanted in enumerate(needs):
        for owner, cols in wanted.items():
            payload = x.blocks[owner].data[cols - x.bounds[owner][0]].tobytes()
            cluster.send(owner, rank, payload, tag=HALO_TAG)

    gathered = []
    for rank, wanted in enumerate(needs):
        xg = np.zeros(A.n)
        start, stop = x.bounds[rank]
        xg[start:stop] = x.blocks[rank].data
        for owner, cols in wanted.items():
            xg[cols] = np.frombuffer(cluster.recv(owner, rank, tag=HALO_TAG), dtype=np.float64)
        gathered.append(xg)

    cluster.compute(cluster.spec.spmv_cost)
    for rank, block in enumerate(A.blocks):
        y.blocks[rank].data[:] = _row_products(block, gathered[rank])
    return y


def _products(x: DistVector, y: DistVector) -> list[np.ndarray]:
    x.check_layout(y)
    return [xb.data * yb.data for xb, yb in zip(x.blocks, y.blocks)]


def dot(x: DistVector, y: DistVector, mode: ReductionMode = ReductionMode.blocking) -> float | CollectiveHandle:
    handle = x.cluster.iallreduce_sum(_products(x, y))
    if ReductionMode(mode) is ReductionMode.nonblocking:
        return handle
    return handle.wait()


def dots(
    pairs: Sequence[tuple[DistVector, DistVector]],
    mode: ReductionMode = ReductionMode.blocking,
) -> np.ndarray | CollectiveHandle:
    """Several dot products fused into one reduction."""
    if not pairs:
        raise UsageError("dots needs at least one pair")
    cluster = pairs[0][0].cluster
    per_pair = [_products(x, y) for x, y in pairs]
    contributions = [np.column_stack([products[rank] for products in per_pair]) for rank in range(cluster.n_ranks)]
    handle = cluster.iallreduce_sum(contributions)
    if ReductionMode(mode) is ReductionMode.nonblocking:
        return handle
    return handle.wait()


def norm2(x: DistVector) -> float:
    value = dot(x, x)
    return math.sqrt(value) if value >= 0 else float("nan")


def axpy(alpha: float, x: DistVector, y: DistVector) -> DistVector:
    """y <- alpha*x + y, in place."""
    x.check_layout(y)
    for xb, yb in zip(x.blocks, y.blocks):
        yb.data += alpha * xb.data
    x.cluster.compute(x.cluster.spec.vector_cost)
    return y


def scale(x: DistVector, alpha: float) -> DistVector:
    for block in x.blocks:
        block.data *= alpha
    x.cluster.compute(x.cluster.spec.vector_cost)
    return x


def divide(x: DistVector, divisor: float) -> DistVector:
    for block in x.blocks:
        block.data /= divisor
    x.cluster.compute(x.cluster.spec.vector_cost)
    return x


def fill(x: DistVector, value: float) -> DistVector:
    for block in x.blocks:
        block.data.fill(value)
    return x


def copy(x: DistVector, *, kind: RegionKind | None = None, label: str | None = None) -> DistVector:
    """Bitwise copy, possibly into the other memory kind."""
    out = DistVector(x.cluster, x.global_length, kind=kind or x.kind, label=label or x.label)
    for src, dst in zip(x.blocks, out.blocks):
        demote(src, dst)
    return out


def assign(dst: DistVector, src: DistVector) -> DistVector:
    src.check_layout(dst)
    for s, d in zip(src.blocks, dst.blocks):
        demote(s, d)
    return dst


def residual(A: CsrMatrix, b: DistVector, x: DistVector, *, label: str | None = None) -> DistVector:
    """r = b - A x."""
    r = spmv(A, x, label=label or f"{b.label}.residual")
    for bb, rb in zip(b.blocks, r.blocks):
        np.subtract(bb.data, rb.data, out=rb.data)
    return r


def all_finite(x: DistVector) -> bool:
    """Per-rank finiteness check combined with a max reduction."""
    flags = [0.0 if np.isfinite(block.data).all() else 1.0 for block in x.blocks]
    return x.cluster.allreduce_max(flags) == 0.0


# ---------------------------------------------------------------------------
# Problem generators
# ---------------------------------------------------------------------------
def identity(n: int) -> sp.csr_matrix:
    return sp.identity(n, format="csr", dtype=np.float64)


def diagonal(values: Sequence[float]) -> sp.csr_matrix:
    return sp.diags(np.asarray(values, dtype=np.float64), format="csr")


def laplacian_1d(n: int, *, shift: float = 0.0) -> sp.csr_matrix:
    return sp.diags([-1.0, 2.0 + shift, -1.0], [-1, 0, 1], shape=(n, n), format="csr")


def laplacian_2d(nx: int, ny: int, *, shift: float = 0.0) -> sp.csr_matrix:
    """Five-point stencil on an nx-by-ny grid with Dirichlet boundaries."""
    tx = laplacian_1d(nx)
    ty = laplacian_1d(ny)
    matrix = sp.kron(sp.identity(ny), tx) + sp.kron(ty, sp.identity(nx))
    if shift:
        matrix = matrix + shift * sp.identity(nx * ny)
    return sp.csr_matrix(matrix)


def read_matrix_market(path: str | Path) -> sp.csr_matrix:
    try:
        matrix = scipy.io.mmread(str(path))
    except (OSError, ValueError) as exc:
        raise ConfigurationError(f"unreadable matrix file {path}: {exc}") from exc
    csr = sp.csr_matrix(matrix, dtype=np.float64)
    csr.sort_indices()
    return csr


def build_matrix(spec: MatrixSpec) -> sp.csr_matrix:
    if spec.source is MatrixSource.identity:
        return identity(spec.n)
    if spec.source is MatrixSource.diagonal:
        return diagonal(spec.values)
    if spec.source is MatrixSource.laplacian_1d:
        return laplacian_1d(spec.n, shift=spec.shift)
    if spec.source is MatrixSource.laplacian_2d:
        return laplacian_2d(spec.nx, spec.ny, shift=spec.shift)
    return read_matrix_market(spec.path)


def build_rhs(kind: RhsKind, matrix: sp.csr_matrix, seed: int) -> np.ndarray:
    n = matrix.shape[0]
    if kind is RhsKind.ones:
        return np.ones(n)
    if kind is RhsKind.unit_solution:
        return matrix @ np.ones(n)
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(2,))).uniform(-1.0, 1.0, size=n)


# ---------------------------------------------------------------------------
# Hessenberg least squares
# ---------------------------------------------------------------------------
class Hessenberg:
    """Upper Hessenberg matrix with incrementally applied Givens rotations.

    H, its rotated triangular factor R, the rotations and the rotated
    right-hand side g all live in reliable regions.
    """

    def __init__(self, m: int, *, registry: MemoryRegistry | None = None, label: str = "krylov") -> None:
        if m < 1:
            raise UsageError(f"hessenberg size must be >= 1, got {m}")
        self.m = m
        self._h = alloc(RegionKind.reliable, (m + 1) * m, registry=registry, label=f"{label}.hessenberg", shape=(m + 1, m))
        self._r = alloc(RegionKind.reliable, (m + 1) * m, registry=registry, label=f"{label}.hessenberg.r", shape=(m + 1, m))
        self._rot = alloc(RegionKind.reliable, 2 * m, registry=registry, label=f"{label}.givens", shape=(2, m))
        self._g = alloc(RegionKind.reliable, m + 1, registry=registry, label=f"{label}.givens.rhs")
        self.columns = 0
        self.lucky_breakdown = False
        self.singular = False
        self.beta = 0.0

    def reset(self, beta: float) -> None:
        for region in (self._h, self._r, self._rot, self._g):
            region.data.fill(0.0)
        self._g.data[0] = beta
        self.beta = beta
        self.columns = 0
        self.lucky_breakdown = False
        self.singular = False

    @property
    def H(self) -> np.ndarray:
        return self._h.data[: self.columns + 1, : self.columns]

    @property
    def residual_estimate(self) -> float:
        return abs(float(self._g.data[self.columns]))

    def append_column(self, h: Sequence[float] | np.ndarray) -> float:
        """Add column j (entries h_0j..h_{j+1,j}) and return |g_{j+1}|."""
        j = self.columns
        if j >= self.m:
            raise UsageError(f"hessenberg already holds {self.m} columns")
        h = np.asarray(h, dtype=np.float64)
        if h.size != j + 2:
            raise UsageError(f"column {j} needs {j + 2} entries, got {h.size}")
        H, R, rot, g = self._h.data, self._r.data, self._rot.data, self._g.data
        H[: j + 2, j] = h
        R[: j + 2, j] = h
        for i in range(j):
            c, s = rot[0, i], rot[1, i]
            upper = c * R[i, j] + s * R[i + 1, j]
            R[i + 1, j] = -s * R[i, j] + c * R[i + 1, j]
            R[i, j] = upper
        a, b = R[j, j], R[j + 1, j]
        if b == 0.0:
            c, s = 1.0, 0.0
            self.lucky_breakdown = True
            self.singular = a == 0.0
        else:
            denom = math.hypot(a, b)
            c, s = a / denom, b / denom
        rot[0, j], rot[1, j] = c, s
        R[j, j] = c * a + s * b
        R[j + 1, j] = 0.0
        g[j + 1] = -s * g[j]
        g[j] = c * g[j]
        self.columns = j + 1
        return abs(float(g[j + 1]))

    def solve(self, k: int | None = None) -> np.ndarray:
        """Least-squares coefficients using the first k columns."""
        k = self.columns if k is None else k
        if k == 0:
            return np.zeros(0)
        if self.singular and k == self.columns:
            k -= 1
            if k == 0:
                return np.zeros(self.columns)
        y = scipy.linalg.solve_triangular(self._r.data[:k, :k], self._g.data[:k], lower=False, check_finite=False)
        if k < self.columns:
            y = np.concatenate([y, np.zeros(self.columns - k)])
        return y


def hessenberg_lsq(H: Hessenberg | np.ndarray, beta: float) -> tuple[np.ndarray, float]:
    """Minimise |beta e1 - H y| for a (j+1)-by-j Hessenberg matrix."""
    if isinstance(H, Hessenberg):
        H = H.H
    H = np.asarray(H, dtype=np.float64)
    if H.ndim != 2 or H.shape[0] != H.shape[1] + 1:
        raise UsageError(f"hessenberg must be (j+1)-by-j, got shape {H.shape}")
    j = H.shape[1]
    if j == 0:
        return np.zeros(0), abs(beta)
    work = Hessenberg(j, label="lsq")
    work.reset(beta)
    for col in range(j):
        work.append_column(H[: col + 2, col])
    return work.solve(), work.residual_estimate
