from __future__ import annotations

from datetime import datetime

from sqlalchemy import (
    Boolean,
    DateTime,
    Float,
    ForeignKey,
    Integer,
    JSON,
    String,
    UniqueConstraint,
    func,
)
from sqlalchemy.orm import Mapped, mapped_column, relationship

from faultsim.database import Base


class CampaignRun(Base):
    __tablename__ = "campaign_runs"
    __table_args__ = (UniqueConstraint("campaign", "run_id", name="uq_campaign_run"),)

    id: Mapped[int] = mapped_column(Integer, primary_key=True, index=True)
    campaign: Mapped[str] = mapped_column(String(120), nullable=False, index=True)
    run_id: Mapped[str] = mapped_column(String(160), nullable=False)
    experiment: Mapped[str] = mapped_column(String(40), nullable=False, index=True)
    arm: Mapped[str] = mapped_column(String(40), nullable=False, index=True)
    seed: Mapped[int] = mapped_column(Integer, nullable=False)
    converged: Mapped[bool | None] = mapped_column(Boolean, nullable=True)
    iterations: Mapped[int | None] = mapped_column(Integer, nullable=True)
    simulated_elapsed: Mapped[str | None] = mapped_column(String(64), nullable=True)
    true_residual: Mapped[float | None] = mapped_column(Float, nullable=True)
    detections: Mapped[int] = mapped_column(Integer, default=0, nullable=False)
    inner_rejections: Mapped[int] = mapped_column(Integer, default=0, nullable=False)
    recoveries: Mapped[int] = mapped_column(Integer, default=0, nullable=False)
    bit_identical: Mapped[bool | None] = mapped_column(Boolean, nullable=True)
    error_type: Mapped[str | None] = mapped_column(String(80), nullable=True, index=True)
    plan_digest: Mapped[str] = mapped_column(String(64), nullable=False)
    fault_ledger_digest: Mapped[str] = mapped_column(String(64), nullable=False)
    record: Mapped[dict] = mapped_column(JSON, nullable=False)
    created_at: Mapped[datetime] = mapped_column(DateTime(timezone=True), server_default=func.now())

    faults: Mapped[list[FaultLedgerRow]] = relationship(back_populates="run", cascade="all, delete-orphan")


class FaultLedgerRow(Base):
    __tablename__ = "fault_ledger"

    id: Mapped[int] = mapped_column(Integer, primary_key=True, index=True)
    run_pk: Mapped[int] = mapped_column(ForeignKey("campaign_runs.id"), nullable=False, index=True)
    event_index: Mapped[int] = mapped_column(Integer, nullable=False)
    status: Mapped[str] = mapped_column(String(20), nullable=False, index=True)
    fault: Mapped[str] = mapped_column(String(20), nullable=False)
    rank: Mapped[int | None] = mapped_column(Integer, nullable=True)
    region_id: Mapped[int | None] = mapped_column(Integer, nullable=True)
    bit: Mapped[int | None] = mapped_column(Integer, nullable=True)
    sim_time: Mapped[str | None] = mapped_column(String(64), nullable=True)
    reason: Mapped[str | None] = mapped_column(String(120), nullable=True)
    payload: Mapped[dict | None] = mapped_column(JSON, nullable=True)

    run: Mapped[CampaignRun] = relationship(back_populates="faults")
