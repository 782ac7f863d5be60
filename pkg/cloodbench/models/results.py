from typing import Literal

from pydantic import BaseModel, Field

from cloodbench.config import SCHEMA_VERSION


class RunError(BaseModel):
    stage: str
    error_type: str
    message: str


class DetectorTaskMetrics(BaseModel):
    task: int  # 1-based: IND = tasks <= task
    auroc: float | None = None
    fpr95: float | None = None
    aupr: float | None = None
    n_ind: int = 0
    n_ood: int = 0


class DetectorSummary(BaseModel):
    detector: str
    per_task: list[DetectorTaskMetrics] = Field(default_factory=list)
    mean_auroc: float | None = None
    mean_fpr95: float | None = None
    mean_aupr: float | None = None
    external: list[DetectorTaskMetrics] = Field(default_factory=list)
    mean_external_auroc: float | None = None
    mean_external_fpr95: float | None = None


class RepetitionRecord(BaseModel):
    repetition: int
    seed: int
    status: Literal["ok", "failed"] = "ok"
    accuracy_matrix: list[list[float]] = Field(default_factory=list)
    aca: list[float] = Field(default_factory=list)  # ACA_t for t = 1..B
    final_aca: float | None = None
    aia: float | None = None
    af: float | None = None
    ood: dict[str, DetectorSummary] = Field(default_factory=dict)
    train_steps: list[int] = Field(default_factory=list)
    wall_clock_seconds: float = 0.0
    error: RunError | None = None


class ResultsRecord(BaseModel):
    schema_version: str = SCHEMA_VERSION
    config_hash: str
    strategy: str
    ood_train: str
    detectors: list[str]
    num_tasks: int
    eval_snapshot: Literal["per-task", "final"] = "per-task"
    ood_average_over: str = "tasks 1..B-1"
    repetitions: list[RepetitionRecord] = Field(default_factory=list)
    summary: dict[str, float | None] = Field(default_factory=dict)


class SweepRow(BaseModel):
    strategy: str
    ood_train: str
    output_dir: str
    config_hash: str
    failed_repetitions: int = 0
    summary: dict[str, float | None] = Field(default_factory=dict)


class SweepReport(BaseModel):
    schema_version: str = SCHEMA_VERSION
    rows: list[SweepRow] = Field(default_factory=list)

    @property
    def failed_repetitions(self) -> int:
        return sum(row.failed_repetitions for row in self.rows)
