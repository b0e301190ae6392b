from __future__ import annotations

import hashlib
from enum import Enum
from fractions import Fraction
from typing import Annotated, Any, Literal, Union

from pydantic import BaseModel, Field, PlainSerializer, PlainValidator, model_validator

from faultsim.config import settings


def as_time(value: Any) -> Fraction:
    """Convert a JSON number, decimal string or Fraction to simulated time."""
    if isinstance(value, bool):
        raise ValueError("time value must be numeric")
    if isinstance(value, Fraction):
        parsed = value
    elif isinstance(value, int):
        parsed = Fraction(value)
    elif isinstance(value, float):
        parsed = Fraction(repr(value))
    elif isinstance(value, str):
        try:
            parsed = Fraction(value.strip())
        except (ValueError, ZeroDivisionError) as exc:
            raise ValueError(f"invalid time value {value!r}") from exc
    else:
        raise ValueError(f"invalid time value {value!r}")
    if parsed < 0:
        raise ValueError(f"time value must be >= 0, got {value!r}")
    return parsed


SimTime = Annotated[Fraction, PlainValidator(as_time), PlainSerializer(str, return_type=str)]


class Schema(BaseModel):
    model_config = {
        "extra": "forbid",
        "arbitrary_types_allowed": True,
        "ser_json_inf_nan": "strings",
    }


class RankStatus(str, Enum):
    alive = "alive"
    failed = "failed"
    respawned = "respawned"


class CollectiveOp(str, Enum):
    sum = "sum_allreduce"
    max = "max_allreduce"
    barrier = "barrier"


class JitterKind(str, Enum):
    none = "none"
    uniform = "uniform"
    lognormal = "lognormal"


class RegionKind(str, Enum):
    reliable = "reliable"
    unreliable = "unreliable"


class FaultKind(str, Enum):
    bit_flip = "bit_flip"
    rank_kill = "rank_kill"


class SkepticalPolicy(str, Enum):
    off = "off"
    detect_only = "detect_only"
    reject_and_restart = "reject_and_restart"
    continue_ = "continue"


class Experiment(str, Enum):
    gmres = "gmres"
    skeptical_gmres = "skeptical_gmres"
    ft_gmres = "ft_gmres"
    pipelined_vs_sync = "pipelined_vs_sync"
    heat_lflr = "heat_lflr"


class MatrixSource(str, Enum):
    identity = "identity"
    diagonal = "diagonal"
    laplacian_1d = "laplacian_1d"
    laplacian_2d = "laplacian_2d"
    matrix_market = "matrix_market"


class RhsKind(str, Enum):
    ones = "ones"
    random = "random"
    unit_solution = "unit_solution"


class HeatInitial(str, Enum):
    zero = "zero"
    sine = "sine"
    spike = "spike"


# ---------------------------------------------------------------------------
# Cluster
# ---------------------------------------------------------------------------
class JitterModel(Schema):
    base_latency: SimTime = Fraction(1)
    distribution: JitterKind = JitterKind.none
    lo: float = Field(default=0.0, ge=0)
    hi: float = Field(default=0.0, ge=0)
    mu: float = 0.0
    sigma: float = Field(default=1.0, ge=0)

    @model_validator(mode="after")
    def _check_bounds(self) -> JitterModel:
        if self.distribution is JitterKind.uniform and self.lo > self.hi:
            raise ValueError(f"uniform jitter needs lo <= hi, got lo={self.lo} hi={self.hi}")
        return self


class ClusterSpec(Schema):
    n_ranks: int = Field(ge=1)
    jitter: JitterModel = Field(default_factory=JitterModel)
    p2p_latency: SimTime = Fraction(1)
    issue_cost: SimTime = Fraction(0)
    spmv_cost: SimTime = Fraction(1)
    vector_cost: SimTime = Fraction(0)


# ---------------------------------------------------------------------------
# Faults
# ---------------------------------------------------------------------------
class FaultEventSpec(Schema):
    kind: FaultKind
    time: SimTime | None = None
    point: str | None = Field(default=None, min_length=1)
    occurrence: int = Field(default=1, ge=1)
    rank: int | None = Field(default=None, ge=0)
    region: int | str | None = None
    element_index: int | None = Field(default=None, ge=0)
    bit_index: int | None = Field(default=None, ge=0, le=63)
    bit_range: tuple[int, int] | None = None

    @model_validator(mode="after")
    def _check_trigger(self) -> FaultEventSpec:
        if (self.time is None) == (self.point is None):
            raise ValueError("fault event needs exactly one of 'time' or 'point'")
        if self.kind is FaultKind.rank_kill and self.rank is None:
            raise ValueError("rank_kill event needs 'rank'")
        if self.kind is FaultKind.bit_flip and self.bit_index is None:
            if self.bit_range is None:
                raise ValueError("bit_flip event needs 'bit_index' or 'bit_range'")
            lo, hi = self.bit_range
            if not 0 <= lo <= hi <= 63:
                raise ValueError(f"bit_range must satisfy 0 <= lo <= hi <= 63, got {self.bit_range}")
        return self


class ExplicitFaults(Schema):
    generator: Literal["explicit"] = "explicit"
    events: list[FaultEventSpec] = Field(default_factory=list)


class RandomCampaign(Schema):
    """Poisson fault arrivals over [0, horizon]. Sign of `rate` is checked by build_plan."""

    generator: Literal["random"] = "random"
    rate: float
    horizon: SimTime
    kill_fraction: float = Field(default=0.0, ge=0, le=1)
    bit_range: tuple[int, int] = (0, 63)
    ranks: list[int] | None = None
    region: str | None = None


class PointCampaign(Schema):
    """One flip inside each window of `every` announcements of `point`."""

    generator: Literal["point"] = "point"
    point: str = Field(min_length=1)
    count: int = Field(ge=0)
    every: int = Field(default=1, ge=1)
    bit_range: tuple[int, int] = (52, 62)
    ranks: list[int] | None = None
    region: str | None = None


FaultSpec = Annotated[Union[ExplicitFaults, RandomCampaign, PointCampaign], Field(discriminator="generator")]


class FaultPlan(Schema):
    seed: int
    generator: FaultSpec
    events: list[FaultEventSpec]

    def digest(self) -> str:
        return hashlib.sha256(self.model_dump_json().encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# Solvers
# ---------------------------------------------------------------------------
class CheckTolerances(Schema):
    orth_tol: float = Field(default=0.0, ge=0)
    norm_growth_factor: float = Field(default=4.0, ge=1)
    residual_increase_tol: float = Field(default=1e-8, ge=0)


class SolverConfig(Schema):
    restart: int = Field(default=30, ge=1)
    tol: float = Field(default=1e-8, gt=0)
    maxit: int = Field(default=500, ge=1)
    pipeline_depth: int = Field(default=0, ge=0, le=1)
    skeptical_policy: SkepticalPolicy = SkepticalPolicy.off
    check_tolerances: CheckTolerances = Field(default_factory=CheckTolerances)
    max_rejections: int = Field(default_factory=lambda: settings.max_rejections, ge=0)


class Detection(Schema):
    iteration: int
    check_name: str
    observed: float
    threshold: float


class IterationSample(Schema):
    iteration: int
    residual_estimate: float
    true_residual: float | None = None
    clock: SimTime


class SolverReport(Schema):
    solver: str
    converged: bool
    iterations: int
    residual_history: list[float]
    simulated_elapsed: SimTime
    detections: list[Detection] = Field(default_factory=list)
    inner_rejections: int = 0
    inner_iterations: int = 0
    restarts: int = 0
    rejections: int = 0
    true_residual: float | None = None
    samples: list[IterationSample] = Field(default_factory=list)


class RecoveryReport(Schema):
    strategy: str = "lflr"
    failed_rank: int
    failed_at: SimTime
    recovered_at: SimTime
    recovery_time: SimTime
    bytes_transferred: int
    ranks_involved: list[int]
    keys_restored: list[str]
    degraded_keys: list[str] = Field(default_factory=list)
    recomputed_steps: int = 0


# ---------------------------------------------------------------------------
# Problems
# ---------------------------------------------------------------------------
class MatrixSpec(Schema):
    source: MatrixSource
    n: int | None = Field(default=None, ge=1)
    nx: int | None = Field(default=None, ge=1)
    ny: int | None = Field(default=None, ge=1)
    values: list[float] | None = None
    shift: float = 0.0
    path: str | None = None

    @model_validator(mode="after")
    def _check_shape(self) -> MatrixSpec:
        if self.source in {MatrixSource.identity, MatrixSource.laplacian_1d} and self.n is None:
            raise ValueError(f"{self.source.value} matrix needs 'n'")
        if self.source is MatrixSource.laplacian_2d and (self.nx is None or self.ny is None):
            raise ValueError("laplacian_2d matrix needs 'nx' and 'ny'")
        if self.source is MatrixSource.diagonal and not self.values:
            raise ValueError("diagonal matrix needs non-empty 'values'")
        if self.source is MatrixSource.matrix_market and not self.path:
            raise ValueError("matrix_market source needs 'path'")
        return self


class ProblemSpec(Schema):
    matrix: MatrixSpec
    rhs: RhsKind = RhsKind.ones


class HeatConfig(Schema):
    n_global: int = Field(ge=1)
    alpha: float = Field(default=1.0, gt=0)
    length: float = Field(default=1.0, gt=0)
    dt: float = Field(gt=0)
    n_steps: int = Field(ge=0)
    left: float = 0.0
    right: float = 0.0
    persist_interval: int = Field(default=10, ge=1)
    initial: HeatInitial = HeatInitial.zero
    lflr_neighbors: int = Field(default=1, ge=1)

    @property
    def dx(self) -> float:
        return self.length / (self.n_global + 1)

    @property
    def stability_bound(self) -> float:
        return self.dx * self.dx / (2.0 * self.alpha)

    @property
    def r(self) -> float:
        return self.alpha * self.dt / (self.dx * self.dx)

    @model_validator(mode="after")
    def _check_cfl(self) -> HeatConfig:
        bound = self.stability_bound
        if self.dt > bound * (1.0 + 1e-12):
            raise ValueError(
                f"dt={self.dt!r} violates the stability bound dt <= dx^2/(2*alpha) = {bound!r}",
            )
        return self


# ---------------------------------------------------------------------------
# Campaigns
# ---------------------------------------------------------------------------
class OutputSpec(Schema):
    dir: str | None = None
    database_url: str | None = None


class CampaignConfig(Schema):
    name: str = Field(default="campaign", min_length=1, max_length=120)
    experiment: Experiment
    problem: ProblemSpec | None = None
    heat: HeatConfig | None = None
    cluster: ClusterSpec
    faults: FaultSpec = Field(default_factory=ExplicitFaults)
    seeds: list[int] = Field(min_length=1)
    solver: SolverConfig = Field(default_factory=SolverConfig)
    inner_solver: SolverConfig | None = None
    output: OutputSpec = Field(default_factory=OutputSpec)

    @model_validator(mode="after")
    def _check_experiment(self) -> CampaignConfig:
        if self.experiment is Experiment.heat_lflr:
            if self.heat is None:
                raise ValueError("heat_lflr experiment needs a 'heat' section")
        elif self.problem is None:
            raise ValueError(f"{self.experiment.value} experiment needs a 'problem' section")
        if self.experiment is Experiment.pipelined_vs_sync and self.solver.pipeline_depth != 1:
            raise ValueError("pipelined_vs_sync experiment needs solver.pipeline_depth = 1")
        return self


class RunError(Schema):
    type: str
    message: str


class RunRecord(Schema):
    run_id: str
    campaign: str
    experiment: Experiment
    arm: str
    seed: int
    converged: bool | None = None
    error: RunError | None = None
    solver_report: SolverReport | None = None
    recoveries: list[RecoveryReport] = Field(default_factory=list)
    true_residual: float | None = None
    bit_identical: bool | None = None
    injected: int = 0
    skipped: int = 0
    plan_digest: str
    fault_ledger_digest: str
    fault_ledger: list[dict[str, Any]] = Field(default_factory=list)


class ArmSummary(Schema):
    arm: str
    runs: int
    converged: int
    mean_simulated_elapsed: float | None
    detections: int
    inner_rejections: int
    recoveries: int
    bit_identical: int
    errors: dict[str, int]


class CampaignSummary(Schema):
    campaign: str
    experiment: Experiment
    runs: int
    arms: list[ArmSummary]
    paired_plans_identical: bool
    exit_code: int
    generated_at: str


class Diagnostic(Schema):
    loc: str
    message: str
