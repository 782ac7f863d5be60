"""Pydantic models for experiment configuration.

Defaults are the desk-scale profile. The full-scale values ship in
``profiles/paper.cfg``.
"""

from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

STRATEGY_KINDS = (
    "naive",
    "cumulative",
    "replay",
    "gdumb",
    "lwf",
    "ewc",
    "agem",
    "icarl-lite",
    "bic",
    "dynamic-er-lite",
    "feature-replay",
)

DETECTOR_KINDS = (
    "msp",
    "maxlogit",
    "energy",
    "entropy",
    "odin",
    "react",
    "dice",
    "ash",
    "scale",
    "tempscale",
    "mahalanobis",
    "knn",
    "vim",
    "she",
)

StrategyKind = Literal[
    "naive",
    "cumulative",
    "replay",
    "gdumb",
    "lwf",
    "ewc",
    "agem",
    "icarl-lite",
    "bic",
    "dynamic-er-lite",
    "feature-replay",
]

DetectorKind = Literal[
    "msp",
    "maxlogit",
    "energy",
    "entropy",
    "odin",
    "react",
    "dice",
    "ash",
    "scale",
    "tempscale",
    "mahalanobis",
    "knn",
    "vim",
    "she",
]


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)


class StreamConfig(_Section):
    source: Literal["synthetic", "csv"] = "synthetic"
    num_classes: int = Field(8, ge=1)
    num_tasks: int = Field(4, ge=1)
    dim: int = Field(16, ge=1)
    per_class: int = Field(200, ge=5)
    separation: float = Field(6.0, ge=0.0)
    reserved_classes: int = Field(2, ge=0)
    train_csv: str | None = None
    test_csv: str | None = None
    seed: int | None = Field(None, ge=0)  # overrides the repetition seed for data generation only

    @model_validator(mode="after")
    def _check_source(self) -> "StreamConfig":
        if self.source == "csv" and not (self.train_csv and self.test_csv):
            raise ValueError("csv source requires stream.train_csv and stream.test_csv")
        if self.source == "synthetic" and self.num_classes % self.num_tasks:
            raise ValueError(
                f"num_classes={self.num_classes} is not divisible by num_tasks={self.num_tasks}"
            )
        return self


class ModelConfig(_Section):
    hidden: list[int] = Field(default_factory=lambda: [64, 32])

    @field_validator("hidden")
    @classmethod
    def _positive_widths(cls, value: list[int]) -> list[int]:
        if not value or any(w <= 0 for w in value):
            raise ValueError("hidden widths must be a nonempty list of positive integers")
        return value


class StrategyConfig(_Section):
    kind: StrategyKind = "naive"
    alpha: float = Field(0.5, ge=0.0, le=1.0)
    kd_weight: float = Field(1.0, ge=0.0)
    kd_temperature: float = Field(2.0, gt=0.0)
    reg_weight: float = Field(100.0, ge=0.0)
    buffer_capacity: int = Field(200, ge=0)
    buffer_policy: Literal["auto", "reservoir", "class-balanced"] = "auto"
    agem_ref_batch: int = Field(64, ge=1)
    fisher_samples: int = Field(200, ge=1)
    branch_width: int | None = Field(None, ge=1)
    bic_val_fraction: float = Field(0.1, gt=0.0, lt=1.0)
    lr: float | None = Field(None, gt=0.0)
    weight_decay: float | None = Field(None, ge=0.0)


class OodTrainConfig(_Section):
    kind: Literal["none", "logitnorm", "oe", "mix"] = "none"
    lambda_: float = Field(0.5, ge=0.0, alias="lambda")
    tau: float = Field(0.04, gt=0.0)
    mix_strength: float = Field(0.3, ge=0.0, le=1.0)
    mix_chain_len: int = Field(2, ge=0, le=8)
    outlier_mode: Literal["uniform-shell", "held-out-classes"] = "uniform-shell"
    outlier_count: int = Field(1000, ge=0)
    outlier_batch: int | None = Field(None, ge=1)


class OptimizerConfig(_Section):
    epochs: int = Field(30, ge=1)
    batch_size: int = Field(32, ge=1)
    lr: float = Field(0.05, gt=0.0)
    momentum: float = Field(0.9, ge=0.0, lt=1.0)
    weight_decay: float = Field(5e-4, ge=0.0)
    milestones: list[tuple[int, float]] = Field(
        default_factory=lambda: [(9, 0.1), (18, 0.1), (25, 0.1)]
    )

    @field_validator("milestones", mode="before")
    @classmethod
    def _parse_milestones(cls, value: object) -> object:
        # "[60:0.1, 120:0.1]" arrives from the config parser as ["60:0.1", "120:0.1"]
        if isinstance(value, list):
            parsed = []
            for item in value:
                if isinstance(item, str):
                    epoch, _, mult = item.partition(":")
                    if not mult:
                        raise ValueError(f"milestone {item!r} must be written epoch:multiplier")
                    parsed.append((int(epoch), float(mult)))
                else:
                    parsed.append(item)
            return parsed
        return value


class CalibrationConfig(_Section):
    refresh_from_buffer: bool = False
    energy_temperature: float = Field(1.0, ge=1.0)
    odin_temperature: float = Field(1000.0, ge=1.0)
    odin_epsilon: float = Field(0.0014, ge=0.0)
    react_percentile: float = Field(90.0, ge=0.0, le=100.0)
    dice_keep: float = Field(0.5, ge=0.0, le=1.0)
    ash_percentile: float = Field(65.0, ge=0.0, lt=100.0)
    knn_k: int = Field(5, ge=1)
    threshold_retain: float = Field(0.95, gt=0.0, le=1.0)


class EvalConfig(_Section):
    final_model_only: bool = False
    external_ood: bool = True
    external_count: int = Field(400, ge=1)


class RunConfig(_Section):
    repetitions: int = Field(1, ge=1)
    seed: int = Field(0, ge=0)
    output_dir: str = "results"
    parallel: bool = False
    max_workers: int = Field(2, ge=1)


class ExperimentConfig(_Section):
    stream: StreamConfig = Field(default_factory=StreamConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    strategy: StrategyConfig = Field(default_factory=StrategyConfig)
    ood_train: OodTrainConfig = Field(default_factory=OodTrainConfig)
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    calibration: CalibrationConfig = Field(default_factory=CalibrationConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)
    run: RunConfig = Field(default_factory=RunConfig)
    detectors: list[DetectorKind] = Field(default_factory=lambda: ["msp", "energy"])

    @field_validator("detectors")
    @classmethod
    def _unique_detectors(cls, value: list[str]) -> list[str]:
        return list(dict.fromkeys(value))
