from __future__ import annotations

from sqlalchemy.orm import Session

from faultsim.models import CampaignRun, FaultLedgerRow
from faultsim.schemas import RunRecord


def record_run(db: Session, *, record: RunRecord) -> CampaignRun:
    """Stage a run and its fault ledger in the current transaction.

    Does not commit; the campaign runner commits once per campaign.
    """
    report = record.solver_report
    row = CampaignRun(
        campaign=record.campaign,
        run_id=record.run_id,
        experiment=record.experiment.value,
        arm=record.arm,
        seed=record.seed,
        converged=record.converged,
        iterations=report.iterations if report else None,
        simulated_elapsed=str(report.simulated_elapsed) if report else None,
        true_residual=record.true_residual,
        detections=len(report.detections) if report else 0,
        inner_rejections=report.inner_rejections if report else 0,
        recoveries=len(record.recoveries),
        bit_identical=record.bit_identical,
        error_type=record.error.type if record.error else None,
        plan_digest=record.plan_digest,
        fault_ledger_digest=record.fault_ledger_digest,
        record=record.model_dump(mode="json", exclude={"fault_ledger"}),
    )
    db.add(row)
    db.flush()
    for entry in record.fault_ledger:
        db.add(
            FaultLedgerRow(
                run_pk=row.id,
                event_index=entry["event"],
                status=entry["status"],
                fault=entry["fault"],
                rank=entry.get("rank"),
                region_id=entry.get("region"),
                bit=entry.get("bit"),
                sim_time=entry.get("time"),
                reason=entry.get("reason"),
                payload=entry,
            ),
        )
    db.flush()
    return row
