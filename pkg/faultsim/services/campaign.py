"""Campaign loading, validation and execution.

A campaign runs every arm of one experiment for every seed. All arms of a
seed get a fresh cluster and the same fault plan, so the only difference
between paired runs is the algorithm.
"""

from __future__ import annotations

import csv
import json
import logging
from collections import Counter, defaultdict
from concurrent.futures import ProcessPoolExecutor
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import scipy.io
from pydantic import ValidationError

from faultsim.config import settings
from faultsim.database import create_session_factory, session_scope
from faultsim.errors import ConfigurationError, FaultSimError
from faultsim.schemas import (
    ArmSummary,
    CampaignConfig,
    CampaignSummary,
    Diagnostic,
    ExplicitFaults,
    Experiment,
    MatrixSource,
    RegionKind,
    RunError,
    RunRecord,
    SolverReport,
)
from faultsim.services.fault_injector import FaultInjector, build_plan, validate_plan
from faultsim.services.heat_app import run_plain, run_with_cpr, run_with_lflr, write_field_csv
from faultsim.services.linalg import CsrMatrix, DistVector, build_matrix, build_rhs, norm2, residual
from faultsim.services.results import record_run
from faultsim.services.sim_runtime import spawn_from_spec
from faultsim.services.solvers import ft_gmres, gmres, pipelined_gmres, skeptical_gmres

logger = logging.getLogger(__name__)

ARMS: dict[Experiment, tuple[str, ...]] = {
    Experiment.gmres: ("gmres",),
    Experiment.skeptical_gmres: ("gmres", "skeptical"),
    Experiment.ft_gmres: ("gmres", "ft_gmres"),
    Experiment.pipelined_vs_sync: ("sync", "pipelined"),
    Experiment.heat_lflr: ("fault_free", "lflr", "cpr"),
}

UNRECOVERABLE = {"UnrecoverableFailure", "PersistentCorruption", "RankFailure", "SimulationDeadlock"}

RESIDUAL_COLUMNS = ["run_id", "arm", "seed", "iteration", "residual_estimate", "true_residual", "clock"]


# ---------------------------------------------------------------------------
# Loading and validation
# ---------------------------------------------------------------------------
def _loc(parts: Sequence[Any]) -> str:
    return ".".join(str(part) for part in parts) or "<root>"


def _semantic_checks(config: CampaignConfig, base_dir: Path) -> list[Diagnostic]:
    found: list[Diagnostic] = []
    if config.problem is not None and config.problem.matrix.source is MatrixSource.matrix_market:
        path = Path(config.problem.matrix.path)
        if not path.is_absolute():
            path = base_dir / path
        try:
            rows, cols, *_ = scipy.io.mminfo(str(path))
        except (OSError, ValueError) as exc:
            found.append(Diagnostic(loc="problem.matrix.path", message=f"unreadable matrix file {path}: {exc}"))
        else:
            if rows != cols:
                found.append(Diagnostic(loc="problem.matrix.path", message=f"matrix must be square, got {rows}x{cols}"))
    if config.heat is not None and config.heat.n_global < config.cluster.n_ranks:
        found.append(
            Diagnostic(
                loc="heat.n_global",
                message=f"n_global={config.heat.n_global} is smaller than n_ranks={config.cluster.n_ranks}",
            ),
        )
    if config.inner_solver is not None and config.experiment is not Experiment.ft_gmres:
        found.append(Diagnostic(loc="inner_solver", message="inner_solver is only used by the ft_gmres experiment"))
    for seed in config.seeds:
        try:
            validate_plan(build_plan(config.faults, seed))
        except ConfigurationError as exc:
            detail = exc.detail if isinstance(exc.detail, dict) else {"message": exc.detail}
            loc = f"faults.events.{detail['event']}.region" if "event" in detail else "faults"
            found.append(Diagnostic(loc=loc, message=detail["message"]))
            break
    return found


def validate_config(path: str | Path) -> list[Diagnostic]:
    """Return every problem found in a campaign file; empty means valid."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        return [Diagnostic(loc="file", message=f"cannot read {path}: {exc.strerror or exc}")]
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        return [Diagnostic(loc=f"line {exc.lineno} column {exc.colno}", message=exc.msg)]
    try:
        config = CampaignConfig.model_validate(raw)
    except ValidationError as exc:
        return [Diagnostic(loc=_loc(error["loc"]), message=error["msg"]) for error in exc.errors()]
    return _semantic_checks(config, path.parent)


def load_config(path: str | Path) -> CampaignConfig:
    path = Path(path)
    diagnostics = validate_config(path)
    if diagnostics:
        raise ConfigurationError(
            {
                "message": f"{path}: {len(diagnostics)} configuration problem(s)",
                "diagnostics": [d.model_dump() for d in diagnostics],
            },
        )
    config = CampaignConfig.model_validate_json(path.read_text(encoding="utf-8"))
    if config.problem is not None and config.problem.matrix.path:
        matrix_path = Path(config.problem.matrix.path)
        if not matrix_path.is_absolute():
            matrix = config.problem.matrix.model_copy(update={"path": str(path.parent / matrix_path)})
            config = config.model_copy(update={"problem": config.problem.model_copy(update={"matrix": matrix})})
    return config


def parse_seed_range(text: str) -> list[int]:
    """'3' -> [3]; '1..4' -> [1, 2, 3, 4]; '1,5,9' -> [1, 5, 9]."""
    text = text.strip()
    try:
        if ".." in text:
            lo, hi = (int(part) for part in text.split("..", 1))
            if hi < lo:
                raise ValueError
            return list(range(lo, hi + 1))
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError as exc:
        raise ConfigurationError(f"invalid seed range {text!r}; use N, A..B or A,B,C") from exc


# ---------------------------------------------------------------------------
# Single runs
# ---------------------------------------------------------------------------
def _run_id(config: CampaignConfig, arm: str, seed: int) -> str:
    return f"{config.name}-{arm}-s{seed}"


def _error(exc: FaultSimError) -> RunError:
    return RunError(type=type(exc).__name__, message=str(exc))


def _sample_rows(run_id: str, arm: str, seed: int, report: SolverReport) -> list[list[Any]]:
    rows = []
    for sample in report.samples:
        rows.append(
            [
                run_id,
                arm,
                seed,
                sample.iteration,
                repr(sample.residual_estimate),
                "" if sample.true_residual is None else repr(sample.true_residual),
                repr(float(sample.clock)),
            ],
        )
    return rows


def run_solver_arm(config: CampaignConfig, arm: str, seed: int) -> tuple[RunRecord, list[list[Any]]]:
    cluster = spawn_from_spec(config.cluster, seed)
    plan = build_plan(config.faults, seed)
    injector = FaultInjector(plan).attach(cluster)
    matrix = build_matrix(config.problem.matrix)
    A = CsrMatrix(cluster, matrix)
    rhs = build_rhs(config.problem.rhs, matrix, seed)
    reference = DistVector.from_array(cluster, rhs, kind=RegionKind.reliable, label="control.b")
    if arm == "ft_gmres":
        b = DistVector.from_array(cluster, rhs, kind=RegionKind.reliable, label="outer.krylov.b")
    else:
        b = DistVector.from_array(cluster, rhs, kind=RegionKind.unreliable, label="krylov.b")

    run_id = _run_id(config, arm, seed)
    report: SolverReport | None = None
    error: RunError | None = None
    rows: list[list[Any]] = []
    x = None
    try:
        if arm in {"gmres", "sync"}:
            x, report = gmres(A, b, None, config.solver)
        elif arm == "skeptical":
            x, report = skeptical_gmres(A, b, None, config.solver)
        elif arm == "ft_gmres":
            x, report = ft_gmres(A, b, None, config.solver, config.inner_solver)
        elif arm == "pipelined":
            x, report = pipelined_gmres(A, b, None, config.solver)
        else:
            raise ConfigurationError(f"unknown solver arm {arm!r}")
    except ConfigurationError:
        raise
    except FaultSimError as exc:
        error = _error(exc)
        logger.warning("run %s failed: %s", run_id, exc)
        for iteration, value in enumerate(getattr(exc, "history", [])):
            rows.append([run_id, arm, seed, iteration, repr(value), "", ""])
    finally:
        injector.finalize(cluster)

    true_residual = None
    if x is not None:
        bnorm = norm2(reference)
        check = norm2(residual(A, reference, x))
        true_residual = check / bnorm if bnorm else check
        rows = _sample_rows(run_id, arm, seed, report)

    record = RunRecord(
        run_id=run_id,
        campaign=config.name,
        experiment=config.experiment,
        arm=arm,
        seed=seed,
        converged=report.converged if report else False,
        error=error,
        solver_report=report,
        true_residual=true_residual,
        injected=injector.injected,
        skipped=injector.skipped,
        plan_digest=plan.digest(),
        fault_ledger_digest=injector.ledger_digest(),
        fault_ledger=injector.ledger,
    )
    return record, rows


def _same_bits(left: np.ndarray, right: np.ndarray) -> bool:
    return left.shape == right.shape and bool(np.array_equal(left.view(np.uint64), right.view(np.uint64)))


def run_heat_arm(
    config: CampaignConfig,
    arm: str,
    seed: int,
    oracle: np.ndarray,
    *,
    fields_dir: Path | None = None,
) -> RunRecord:
    cluster = spawn_from_spec(config.cluster, seed)
    plan = build_plan(ExplicitFaults() if arm == "fault_free" else config.faults, seed)
    run_id = _run_id(config, arm, seed)
    error = None
    result = None
    injector = FaultInjector(plan).attach(cluster)
    try:
        if arm == "cpr":
            result = run_with_cpr(config.heat, cluster)
        elif arm in {"lflr", "fault_free"}:
            result = run_with_lflr(config.heat, cluster)
        else:
            raise ConfigurationError(f"unknown heat arm {arm!r}")
    except ConfigurationError:
        raise
    except FaultSimError as exc:
        error = _error(exc)
        logger.warning("run %s failed: %s", run_id, exc)
    finally:
        injector.finalize(cluster)

    if result is not None and fields_dir is not None:
        write_field_csv(fields_dir / f"{run_id}.csv", result.field)
    return RunRecord(
        run_id=run_id,
        campaign=config.name,
        experiment=config.experiment,
        arm=arm,
        seed=seed,
        converged=None,
        error=error,
        recoveries=result.recoveries if result else [],
        bit_identical=_same_bits(result.field, oracle) if result else False,
        injected=injector.injected,
        skipped=injector.skipped,
        plan_digest=plan.digest(),
        fault_ledger_digest=injector.ledger_digest(),
        fault_ledger=injector.ledger,
    )


def run_seed(
    config: CampaignConfig,
    seed: int,
    arms: Sequence[str],
    *,
    fields_dir: Path | None = None,
) -> list[tuple[RunRecord, list[list[Any]]]]:
    results = []
    if config.experiment is Experiment.heat_lflr:
        oracle = run_plain(config.heat, spawn_from_spec(config.cluster, seed)).field
        for arm in arms:
            results.append((run_heat_arm(config, arm, seed, oracle, fields_dir=fields_dir), []))
        return results
    for arm in arms:
        results.append(run_solver_arm(config, arm, seed))
    return results


def _run_seed_payload(payload: tuple[str, int, tuple[str, ...], str | None]) -> list[tuple[str, list[list[Any]]]]:
    config_json, seed, arms, fields_dir = payload
    config = CampaignConfig.model_validate_json(config_json)
    runs = run_seed(config, seed, arms, fields_dir=Path(fields_dir) if fields_dir else None)
    return [(record.model_dump_json(), rows) for record, rows in runs]


# ---------------------------------------------------------------------------
# Campaigns
# ---------------------------------------------------------------------------
def summarize(config: CampaignConfig, records: list[RunRecord], generated_at: str) -> CampaignSummary:
    by_arm: dict[str, list[RunRecord]] = defaultdict(list)
    for record in records:
        by_arm[record.arm].append(record)

    arms = []
    for arm in ARMS[config.experiment]:
        runs = by_arm.get(arm, [])
        if not runs:
            continue
        elapsed = [float(r.solver_report.simulated_elapsed) for r in runs if r.solver_report is not None]
        arms.append(
            ArmSummary(
                arm=arm,
                runs=len(runs),
                converged=sum(1 for r in runs if r.converged),
                mean_simulated_elapsed=sum(elapsed) / len(elapsed) if elapsed else None,
                detections=sum(len(r.solver_report.detections) for r in runs if r.solver_report),
                inner_rejections=sum(r.solver_report.inner_rejections for r in runs if r.solver_report),
                recoveries=sum(len(r.recoveries) for r in runs),
                bit_identical=sum(1 for r in runs if r.bit_identical),
                errors=dict(sorted(Counter(r.error.type for r in runs if r.error).items())),
            ),
        )

    digests: dict[int, set[str]] = defaultdict(set)
    for record in records:
        if record.arm != "fault_free":
            digests[record.seed].add(record.plan_digest)
    unrecoverable = any(record.error and record.error.type in UNRECOVERABLE for record in records)
    return CampaignSummary(
        campaign=config.name,
        experiment=config.experiment,
        runs=len(records),
        arms=arms,
        paired_plans_identical=all(len(found) == 1 for found in digests.values()),
        exit_code=3 if unrecoverable else 0,
        generated_at=generated_at,
    )


def _summary_text(summary: CampaignSummary) -> str:
    lines = [
        f"campaign {summary.campaign} ({summary.experiment.value}): {summary.runs} runs",
        f"paired fault plans identical: {'yes' if summary.paired_plans_identical else 'NO'}",
        "",
        f"{'arm':<12} {'runs':>5} {'conv':>5} {'mean time':>12} {'detect':>7} {'inner rej':>9} {'recov':>6} {'bitid':>6}  errors",
    ]
    for arm in summary.arms:
        elapsed = "-" if arm.mean_simulated_elapsed is None else f"{arm.mean_simulated_elapsed:.3f}"
        errors = ", ".join(f"{name}={count}" for name, count in arm.errors.items()) or "-"
        lines.append(
            f"{arm.arm:<12} {arm.runs:>5} {arm.converged:>5} {elapsed:>12} {arm.detections:>7} "
            f"{arm.inner_rejections:>9} {arm.recoveries:>6} {arm.bit_identical:>6}  {errors}",
        )
    lines.append("")
    lines.append(f"exit code {summary.exit_code}")
    return "\n".join(lines) + "\n"


def write_outputs(
    out_dir: Path,
    records: list[RunRecord],
    rows: list[list[Any]],
    summary: CampaignSummary,
) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with (out_dir / "records.jsonl").open("w", encoding="utf-8") as handle:
        for record in records:
            handle.write(record.model_dump_json() + "\n")
    with (out_dir / "residuals.csv").open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(RESIDUAL_COLUMNS)
        writer.writerows(rows)
    (out_dir / "summary.json").write_text(summary.model_dump_json(indent=2) + "\n", encoding="utf-8")
    (out_dir / "summary.txt").write_text(_summary_text(summary), encoding="utf-8")


def store_records(database_url: str, records: list[RunRecord]) -> int:
    factory = create_session_factory(database_url)
    with session_scope(factory) as db:
        for record in records:
            record_run(db, record=record)
        db.commit()
    return len(records)


def run_campaign(
    config: CampaignConfig,
    *,
    out_dir: str | Path | None = None,
    seeds: Sequence[int] | None = None,
    arms: Sequence[str] | None = None,
    workers: int | None = None,
    database_url: str | None = None,
) -> CampaignSummary:
    seeds = list(seeds) if seeds is not None else list(config.seeds)
    if not seeds:
        raise ConfigurationError("campaign needs at least one seed")
    known = ARMS[config.experiment]
    selected = tuple(arms) if arms else known
    unknown = [arm for arm in selected if arm not in known]
    if unknown:
        raise ConfigurationError(f"unknown arm(s) {unknown} for {config.experiment.value}; choose from {list(known)}")
    out = Path(out_dir or config.output.dir or Path(settings.output_dir) / config.name)
    fields_dir = out / "fields" if config.experiment is Experiment.heat_lflr else None
    workers = workers or settings.workers

    logger.info("campaign %s: %s seeds x %s arms, %s worker(s)", config.name, len(seeds), len(selected), workers)
    runs: list[tuple[RunRecord, list[list[Any]]]] = []
    if workers > 1 and len(seeds) > 1:
        payloads = [(config.model_dump_json(), seed, selected, str(fields_dir) if fields_dir else None) for seed in seeds]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for chunk in pool.map(_run_seed_payload, payloads):
                runs.extend((RunRecord.model_validate_json(record), rows) for record, rows in chunk)
    else:
        for seed in seeds:
            runs.extend(run_seed(config, seed, selected, fields_dir=fields_dir))

    records = [record for record, _ in runs]
    rows = [row for _, chunk in runs for row in chunk]
    summary = summarize(config, records, datetime.now(timezone.utc).isoformat())
    write_outputs(out, records, rows, summary)

    database_url = database_url or config.output.database_url or settings.database_url
    if database_url:
        stored = store_records(database_url, records)
        logger.info("stored %s runs in %s", stored, database_url)
    return summary
