"""Restarted GMRES and its resilient variants.

Every variant keeps vectors in unreliable memory unless told otherwise and
keeps the Hessenberg factorisation and scalars reliable. Convergence is only
ever declared from an explicitly recomputed residual.
"""

from __future__ import annotations

import logging
import math
from typing import Callable

import numpy as np

from faultsim.errors import Diverged, PersistentCorruption, UsageError
from faultsim.schemas import (
    Detection,
    IterationSample,
    RegionKind,
    SkepticalPolicy,
    SolverConfig,
    SolverReport,
)
from faultsim.services.linalg import (
    CsrMatrix,
    DistVector,
    Hessenberg,
    ReductionMode,
    all_finite,
    assign,
    axpy,
    copy,
    divide,
    dot,
    dots,
    norm2,
    residual,
    spmv,
)
from faultsim.services.sim_runtime import SimCluster

logger = logging.getLogger(__name__)

Preconditioner = Callable[[DistVector], DistVector]


def _label(scope: str, name: str) -> str:
    return f"{scope}krylov.{name}"


def _finite(value: float) -> bool:
    return math.isfinite(value)


class _Tracker:
    def __init__(self, cluster: SimCluster, solver: str) -> None:
        self.cluster = cluster
        self.solver = solver
        self.started = cluster.clock
        self.history: list[float] = []
        self.samples: list[IterationSample] = []
        self.detections: list[Detection] = []
        self.iterations = 0
        self.restarts = 0
        self.rejections = 0
        self.true_residual: float | None = None

    def initial(self, relative: float) -> None:
        self.history.append(relative)
        self.true_residual = relative
        self.samples.append(
            IterationSample(iteration=0, residual_estimate=relative, true_residual=relative, clock=self.cluster.clock),
        )

    def step(self, estimate: float) -> None:
        self.iterations += 1
        self.history.append(estimate)
        self.samples.append(
            IterationSample(iteration=self.iterations, residual_estimate=estimate, clock=self.cluster.clock),
        )

    def verified(self, relative: float) -> None:
        self.true_residual = relative
        self.samples[-1].true_residual = relative

    def detect(self, iteration: int, check_name: str, observed: float, threshold: float) -> Detection:
        detection = Detection(iteration=iteration, check_name=check_name, observed=observed, threshold=threshold)
        self.detections.append(detection)
        logger.warning(
            "%s: check %s failed at iteration %s (observed=%r threshold=%r)",
            self.solver,
            check_name,
            iteration,
            observed,
            threshold,
        )
        return detection

    def diverged(self, message: str) -> Diverged:
        logger.warning("%s diverged after %s iterations: %s", self.solver, self.iterations, message)
        return Diverged(message, history=self.history)

    def report(self, converged: bool) -> SolverReport:
        return SolverReport(
            solver=self.solver,
            converged=converged,
            iterations=self.iterations,
            residual_history=list(self.history),
            simulated_elapsed=self.cluster.clock - self.started,
            detections=list(self.detections),
            restarts=self.restarts,
            rejections=self.rejections,
            true_residual=self.true_residual,
            samples=list(self.samples),
        )


def _start(
    A: CsrMatrix,
    b: DistVector,
    x0: DistVector | None,
    *,
    scope: str,
    kind: RegionKind,
) -> DistVector:
    if b.global_length != A.n or b.cluster is not A.cluster:
        raise UsageError(f"right-hand side {b.label}[{b.global_length}] does not match matrix n={A.n}")
    if x0 is None:
        return DistVector(A.cluster, A.n, kind=kind, label=_label(scope, "x"))
    b.check_layout(x0)
    return copy(x0, kind=kind, label=_label(scope, "x"))


def _update(x: DistVector, basis: list[DistVector], y: np.ndarray) -> None:
    for coefficient, vector in zip(y, basis):
        axpy(float(coefficient), vector, x)


def _orthogonalize(w: DistVector, basis: list[DistVector]) -> np.ndarray:
    """Modified Gram-Schmidt with one blocking reduction per projection."""
    j = len(basis) - 1
    h = np.zeros(j + 2)
    for i, vector in enumerate(basis):
        h[i] = dot(w, vector)
        axpy(-h[i], vector, w)
    h[j + 1] = norm2(w)
    return h


# ---------------------------------------------------------------------------
# GMRES and skeptical GMRES
# ---------------------------------------------------------------------------
def _column_checks(
    tracker: _Tracker,
    w: DistVector,
    h: np.ndarray,
    *,
    norm_a: float,
    config: SolverConfig,
) -> list[Detection]:
    iteration = tracker.iterations + 1
    bad = sum(int(np.count_nonzero(~np.isfinite(block.data))) for block in w.blocks)
    bad += int(np.count_nonzero(~np.isfinite(h)))
    if bad:
        return [tracker.detect(iteration, "finite", float(bad), 0.0)]
    # basis vectors are normalised when created
    max_basis_norm = 1.0
    bound = config.check_tolerances.norm_growth_factor * norm_a * max_basis_norm
    observed = float(np.max(np.abs(h)))
    if observed > bound:
        return [tracker.detect(iteration, "norm_bound", observed, bound)]
    return []


def _residual_check(tracker: _Tracker, previous: float, current: float, config: SolverConfig) -> list[Detection]:
    threshold = previous * (1.0 + config.check_tolerances.residual_increase_tol)
    if math.isnan(current) or current > threshold:
        return [tracker.detect(tracker.iterations, "residual_monotone", current, threshold)]
    return []


def _orthogonality_audit(tracker: _Tracker, basis: list[DistVector], config: SolverConfig) -> list[Detection]:
    newest = basis[-1]
    values = dots([(newest, vector) for vector in basis[:-1]])
    observed = float(np.max(np.abs(values)))
    threshold = config.check_tolerances.orth_tol
    if math.isnan(observed) or observed > threshold:
        return [tracker.detect(tracker.iterations, "orthogonality", observed, threshold)]
    return []


def _gmres(
    A: CsrMatrix,
    b: DistVector,
    x0: DistVector | None,
    config: SolverConfig,
    *,
    scope: str,
    solver: str,
    policy: SkepticalPolicy,
) -> tuple[DistVector, SolverReport]:
    cluster = A.cluster
    tracker = _Tracker(cluster, solver)
    x = _start(A, b, x0, scope=scope, kind=RegionKind.unreliable)
    cluster.reach(f"{scope}krylov.solve")

    bnorm = norm2(b)
    if not _finite(bnorm):
        raise tracker.diverged("right-hand side norm is not finite")
    if bnorm == 0.0:
        for block in x.blocks:
            block.data.fill(0.0)
        tracker.initial(0.0)
        return x, tracker.report(True)

    checks = policy is not SkepticalPolicy.off
    norm_a = A.norm_inf() if checks else 0.0
    audit = checks and config.check_tolerances.orth_tol > 0
    verified = None
    if policy is SkepticalPolicy.reject_and_restart:
        verified = copy(x, kind=RegionKind.reliable, label="control.krylov.x")
    H = Hessenberg(config.restart, registry=cluster.memory, label=f"{scope}krylov")

    r = residual(A, b, x, label=_label(scope, "r"))
    beta = norm2(r)
    relative = beta / bnorm
    tracker.initial(relative)
    if not _finite(relative):
        raise tracker.diverged("initial residual is not finite")
    converged = relative <= config.tol
    consecutive = 0

    while not converged and tracker.iterations < config.maxit:
        H.reset(beta)
        basis = [divide(copy(r, label=_label(scope, "basis")), beta)]
        previous = relative
        rejected = False

        for j in range(config.restart):
            if tracker.iterations >= config.maxit:
                break
            w = spmv(A, basis[j], label=_label(scope, "w"))
            cluster.reach(f"{scope}arnoldi.step")
            h = _orthogonalize(w, basis)

            found = _column_checks(tracker, w, h, norm_a=norm_a, config=config) if checks else []
            if found and policy is SkepticalPolicy.reject_and_restart:
                rejected = True
                break
            if found and policy is SkepticalPolicy.continue_ and found[0].check_name == "finite":
                break

            estimate = H.append_column(h) / bnorm
            tracker.step(estimate)
            if checks:
                found = _residual_check(tracker, previous, estimate, config)
                previous = estimate
                if found and policy is SkepticalPolicy.reject_and_restart:
                    rejected = True
                    break
            if not _finite(estimate):
                raise tracker.diverged(f"residual estimate became {estimate!r}")
            if H.lucky_breakdown or estimate <= config.tol:
                break
            if j + 1 < config.restart:
                basis.append(divide(w, h[j + 1]))
                if audit and _orthogonality_audit(tracker, basis, config):
                    if policy is SkepticalPolicy.reject_and_restart:
                        rejected = True
                        break

        if rejected:
            tracker.rejections += 1
            consecutive += 1
            if consecutive > config.max_rejections:
                raise PersistentCorruption(
                    {
                        "message": f"{solver}: {consecutive} consecutive cycles rejected",
                        "iterations": tracker.iterations,
                    },
                )
            logger.info("%s: discarding cycle, restarting from last verified iterate", solver)
            assign(x, verified)
        else:
            if H.columns:
                _update(x, basis, H.solve())

        r = residual(A, b, x, label=_label(scope, "r"))
        beta = norm2(r)
        relative = beta / bnorm
        tracker.verified(relative)
        if not _finite(relative):
            raise tracker.diverged(f"true residual became {relative!r}")
        converged = relative <= config.tol
        if not rejected:
            consecutive = 0
            if verified is not None:
                assign(verified, x)
        if not converged:
            tracker.restarts += 1

    logger.debug("%s finished: converged=%s iterations=%s", solver, converged, tracker.iterations)
    return x, tracker.report(converged)


def gmres(
    A: CsrMatrix,
    b: DistVector,
    x0: DistVector | None = None,
    config: SolverConfig | None = None,
    *,
    scope: str = "",
) -> tuple[DistVector, SolverReport]:
    """Restarted GMRES(m) with modified Gram-Schmidt and no fault handling."""
    return _gmres(
        A, b, x0, config or SolverConfig(), scope=scope, solver="gmres", policy=SkepticalPolicy.off,
    )


def skeptical_gmres(
    A: CsrMatrix,
    b: DistVector,
    x0: DistVector | None = None,
    config: SolverConfig | None = None,
    *,
    scope: str = "",
) -> tuple[DistVector, SolverReport]:
    """GMRES with cheap invariant checks on every Arnoldi column.

    Checks: finiteness of the new vector and column, |h_ij| bounded by a
    multiple of the matrix infinity norm, non-increasing residual estimate,
    and optionally an orthogonality audit of the new basis vector.
    """
    config = config or SolverConfig(skeptical_policy=SkepticalPolicy.detect_only)
    policy = config.skeptical_policy
    if policy is SkepticalPolicy.off:
        policy = SkepticalPolicy.detect_only
    return _gmres(A, b, x0, config, scope=scope, solver="skeptical_gmres", policy=policy)


# ---------------------------------------------------------------------------
# Flexible GMRES and the fault-tolerant nesting
# ---------------------------------------------------------------------------
def fgmres(
    A: CsrMatrix,
    b: DistVector,
    x0: DistVector | None = None,
    config: SolverConfig | None = None,
    preconditioner: Preconditioner | None = None,
    *,
    scope: str = "outer.",
    kind: RegionKind = RegionKind.reliable,
    solver: str = "fgmres",
) -> tuple[DistVector, SolverReport]:
    """Flexible GMRES: the preconditioner may change every iteration."""
    config = config or SolverConfig()
    cluster = A.cluster
    tracker = _Tracker(cluster, solver)
    x = _start(A, b, x0, scope=scope, kind=kind)
    cluster.reach(f"{scope}krylov.solve")
    apply = preconditioner or (lambda v: copy(v, kind=kind, label=_label(scope, "z")))

    bnorm = norm2(b)
    if not _finite(bnorm):
        raise tracker.diverged("right-hand side norm is not finite")
    if bnorm == 0.0:
        for block in x.blocks:
            block.data.fill(0.0)
        tracker.initial(0.0)
        return x, tracker.report(True)

    H = Hessenberg(config.restart, registry=cluster.memory, label=f"{scope}krylov")
    r = residual(A, b, x, label=_label(scope, "r"))
    beta = norm2(r)
    relative = beta / bnorm
    tracker.initial(relative)
    if not _finite(relative):
        raise tracker.diverged("initial residual is not finite")
    converged = relative <= config.tol

    while not converged and tracker.iterations < config.maxit:
        H.reset(beta)
        basis = [divide(copy(r, label=_label(scope, "basis")), beta)]
        search: list[DistVector] = []
        for j in range(config.restart):
            if tracker.iterations >= config.maxit:
                break
            z = apply(basis[j])
            search.append(z)
            w = spmv(A, z, label=_label(scope, "w"))
            cluster.reach(f"{scope}arnoldi.step")
            h = _orthogonalize(w, basis)
            estimate = H.append_column(h) / bnorm
            tracker.step(estimate)
            if not _finite(estimate):
                raise tracker.diverged(f"residual estimate became {estimate!r}")
            if H.lucky_breakdown or estimate <= config.tol:
                break
            if j + 1 < config.restart:
                basis.append(divide(w, h[j + 1]))

        if H.columns:
            _update(x, search, H.solve())
        r = residual(A, b, x, label=_label(scope, "r"))
        beta = norm2(r)
        relative = beta / bnorm
        tracker.verified(relative)
        if not _finite(relative):
            raise tracker.diverged(f"true residual became {relative!r}")
        converged = relative <= config.tol
        if not converged:
            tracker.restarts += 1

    return x, tracker.report(converged)


class InnerSolve:
    """Preconditioner that runs a plain GMRES solve in unreliable memory.

    With `validate` on, the promoted result is accepted only if it is finite
    and actually reduces the residual of the inner system; otherwise the
    outer iteration falls back to the identity for that step.
    """

    def __init__(self, A: CsrMatrix, config: SolverConfig, *, validate: bool = True) -> None:
        self.A = A
        self.config = config
        self.validate = validate
        self.iterations = 0
        self.rejections = 0
        self.solves = 0

    def __call__(self, v: DistVector) -> DistVector:
        self.solves += 1
        q = copy(v, kind=RegionKind.unreliable, label="inner.krylov.rhs")
        z: DistVector | None = None
        try:
            inner, report = gmres(self.A, q, None, self.config, scope="inner.")
            self.iterations += report.iterations
            z = copy(inner, kind=RegionKind.reliable, label="outer.krylov.z")
        except Diverged as exc:
            if not self.validate:
                raise
            self.iterations += max(len(exc.history) - 1, 0)
        if z is not None and (not self.validate or self._accept(v, z)):
            return z
        self.rejections += 1
        logger.info("inner solve %s rejected, using the identity for this step", self.solves)
        return copy(v, kind=RegionKind.reliable, label="outer.krylov.z")

    def _accept(self, v: DistVector, z: DistVector) -> bool:
        if not all_finite(z):
            return False
        check = residual(self.A, v, z, label="outer.krylov.check")
        return norm2(check) < norm2(v)


def ft_gmres(
    A: CsrMatrix,
    b: DistVector,
    x0: DistVector | None = None,
    outer_config: SolverConfig | None = None,
    inner_config: SolverConfig | None = None,
) -> tuple[DistVector, SolverReport]:
    """Reliable flexible GMRES outer loop around unreliable inner GMRES solves."""
    inner = InnerSolve(A, inner_config or SolverConfig(restart=10, maxit=10, tol=1e-1))
    x, report = fgmres(A, b, x0, outer_config, inner, solver="ft_gmres")
    return x, report.model_copy(
        update={"inner_iterations": inner.iterations, "inner_rejections": inner.rejections},
    )


# ---------------------------------------------------------------------------
# Pipelined GMRES
# ---------------------------------------------------------------------------
def pipelined_gmres(
    A: CsrMatrix,
    b: DistVector,
    x0: DistVector | None = None,
    config: SolverConfig | None = None,
    *,
    scope: str = "",
) -> tuple[DistVector, SolverReport]:
    """GMRES with the normalisation reduction overlapped with the next SpMV.

    Each new candidate vector is multiplied by A while its norm is still in
    flight, so its Hessenberg column completes one step late. Projection
    coefficients come from a single fused (classical Gram-Schmidt) reduction.
    """
    config = config or SolverConfig(pipeline_depth=1)
    if config.pipeline_depth != 1:
        raise UsageError(f"pipelined_gmres needs pipeline_depth = 1, got {config.pipeline_depth}")
    cluster = A.cluster
    tracker = _Tracker(cluster, "pipelined_gmres")
    x = _start(A, b, x0, scope=scope, kind=RegionKind.unreliable)
    cluster.reach(f"{scope}krylov.solve")

    bnorm = norm2(b)
    if not _finite(bnorm):
        raise tracker.diverged("right-hand side norm is not finite")
    if bnorm == 0.0:
        for block in x.blocks:
            block.data.fill(0.0)
        tracker.initial(0.0)
        return x, tracker.report(True)

    H = Hessenberg(config.restart, registry=cluster.memory, label=f"{scope}krylov")
    r = residual(A, b, x, label=_label(scope, "r"))
    beta = norm2(r)
    relative = beta / bnorm
    tracker.initial(relative)
    if not _finite(relative):
        raise tracker.diverged("initial residual is not finite")
    converged = relative <= config.tol

    while not converged and tracker.iterations < config.maxit:
        H.reset(beta)
        basis = [divide(copy(r, label=_label(scope, "basis")), beta)]
        z = spmv(A, basis[0], label=_label(scope, "w"))
        cluster.reach(f"{scope}arnoldi.step")
        u: DistVector | None = None
        column: np.ndarray | None = None

        for i in range(config.restart + 1):
            if i > 0:
                more = i < config.restart and tracker.iterations + 1 < config.maxit
                pending = dot(u, u, mode=ReductionMode.nonblocking)
                z = spmv(A, u, label=_label(scope, "w")) if more else None
                if more:
                    cluster.reach(f"{scope}arnoldi.step")
                nu_squared = pending.wait()
                nu = math.sqrt(nu_squared) if nu_squared >= 0 else float("nan")
                column[i] = nu
                estimate = H.append_column(column) / bnorm
                tracker.step(estimate)
                if not _finite(estimate):
                    raise tracker.diverged(f"residual estimate became {estimate!r}")
                if H.lucky_breakdown or estimate <= config.tol or not more:
                    break
                basis.append(divide(u, nu))
                divide(z, nu)
            h = dots([(vector, z) for vector in basis])
            for coefficient, vector in zip(h, basis):
                axpy(-float(coefficient), vector, z)
            u = z
            column = np.zeros(i + 2)
            column[: i + 1] = h

        if H.columns:
            _update(x, basis, H.solve())
        r = residual(A, b, x, label=_label(scope, "r"))
        beta = norm2(r)
        relative = beta / bnorm
        tracker.verified(relative)
        if not _finite(relative):
            raise tracker.diverged(f"true residual became {relative!r}")
        converged = relative <= config.tol
        if not converged:
            tracker.restarts += 1

    return x, tracker.report(converged)
