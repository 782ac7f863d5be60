from typing import Literal

from pydantic import BaseModel


class DetectorState(BaseModel):
    """Audit view of one calibrated detector; scores are oriented higher-is-OOD."""

    kind: str
    task: int
    orientation: Literal["higher_is_ood"] = "higher_is_ood"
    threshold: float | None = None
    temperature: float | None = None
    odin_epsilon: float | None = None
    react_threshold: float | None = None
    dice_mask: list[list[int]] | None = None
    dice_mean_features: list[float] | None = None
    ash_percentile: float | None = None
    vim_alpha: float | None = None
    vim_dim: int | None = None
    class_means: list[list[float]] | None = None
    class_counts: list[int] | None = None
    covariance: list[list[float]] | None = None
    index_size: int | None = None
    knn_k: int | None = None
    patterns: list[list[float]] | None = None
