"""Exemplar memory shared by the rehearsal strategies."""

from __future__ import annotations

import csv
import logging
from collections.abc import Iterable
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from cloodbench.errors import ConfigError
from cloodbench.services.datastream import Dataset
from cloodbench.services.network import ParamSet, extract_features

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class Exemplar:
    input: np.ndarray
    label: int
    logits: np.ndarray | None = None


@dataclass(eq=False)
class ExemplarBuffer:
    """Capacity-bounded store of (input, label[, logits]).

    In ``feature`` mode the stored vectors are features h(x) taken at storage time.
    """

    capacity: int
    policy: str = "reservoir"  # reservoir | class-balanced
    mode: str = "raw"  # raw | feature
    entries: list[Exemplar] = field(default_factory=list)
    seen_count: int = 0

    def __post_init__(self) -> None:
        if self.capacity < 0:
            raise ConfigError(f"buffer capacity must be nonnegative, got {self.capacity}")
        if self.policy not in ("reservoir", "class-balanced"):
            raise ConfigError(f"unknown buffer policy {self.policy!r}")
        if self.mode not in ("raw", "feature"):
            raise ConfigError(f"unknown buffer mode {self.mode!r}")

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def inputs(self) -> np.ndarray:
        return np.stack([e.input for e in self.entries])

    @property
    def labels(self) -> np.ndarray:
        return np.array([e.label for e in self.entries], dtype=int)

    def class_counts(self) -> dict[int, int]:
        counts: dict[int, int] = {}
        for e in self.entries:
            counts[e.label] = counts.get(e.label, 0) + 1
        return counts


def reservoir_update(buffer: ExemplarBuffer, item: Exemplar, rng: np.random.Generator) -> ExemplarBuffer:
    """Classic reservoir rule: every item seen so far is kept with equal probability."""
    if buffer.policy != "reservoir":
        raise ConfigError("reservoir_update requires a reservoir buffer")
    if len(buffer.entries) < buffer.capacity:
        buffer.entries.append(item)
    elif buffer.capacity > 0:
        j = int(rng.integers(0, buffer.seen_count + 1))
        if j < buffer.capacity:
            buffer.entries[j] = item
    buffer.seen_count += 1
    return buffer


def herding_select(features: np.ndarray, m: int) -> list[int]:
    """Greedy exemplar order whose running mean tracks the class feature mean.

    Ties resolve to the lowest index.
    """
    n = len(features)
    if m > n:
        raise ConfigError(f"cannot select {m} exemplars out of {n}")
    mu = features.mean(axis=0)
    available = np.ones(n, dtype=bool)
    running = np.zeros_like(mu)
    order: list[int] = []
    for k in range(1, m + 1):
        candidates = (running + features) / k
        dist = np.linalg.norm(mu - candidates, axis=1)
        dist[~available] = np.inf
        i = int(np.argmin(dist))
        order.append(i)
        available[i] = False
        running = running + features[i]
    return order


def class_balanced_update(
    buffer: ExemplarBuffer,
    task: Dataset,
    classes_seen: Iterable[int],
    features: np.ndarray,
    logits: np.ndarray | None = None,
) -> ExemplarBuffer:
    """Re-divide capacity evenly over the classes seen and fill slots from ``task``.

    ``features`` are aligned with ``task`` rows and drive herding; old classes
    are truncated keeping their herding prefix.
    """
    if buffer.policy != "class-balanced":
        raise ConfigError("class_balanced_update requires a class-balanced buffer")
    seen = sorted({int(c) for c in classes_seen} | {e.label for e in buffer.entries})
    buffer.seen_count += len(task)
    if not seen:
        return buffer
    quota = buffer.capacity // len(seen)

    per_class: dict[int, list[Exemplar]] = {}
    for e in buffer.entries:
        per_class.setdefault(e.label, []).append(e)
    for c in per_class:
        per_class[c] = per_class[c][:quota]

    for c in np.unique(task.labels):
        c = int(c)
        if c in per_class:
            continue
        rows = np.flatnonzero(task.labels == c)
        picks = herding_select(features[rows], min(quota, len(rows)))
        stored = features if buffer.mode == "feature" else task.inputs
        per_class[c] = [
            Exemplar(
                stored[rows[i]].copy(),
                c,
                None if logits is None else logits[rows[i]].copy(),
            )
            for i in picks
        ]

    buffer.entries = [e for c in sorted(per_class) for e in per_class[c]]
    logger.debug("Class-balanced buffer: %d classes x %d slots, %d entries", len(seen), quota, len(buffer))
    return buffer


def sample(buffer: ExemplarBuffer, size: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``size`` entries without replacement (fewer if the buffer is smaller)."""
    idx = rng.choice(len(buffer), size=min(size, len(buffer)), replace=False)
    return buffer.inputs[idx], buffer.labels[idx]


def as_dataset(buffer: ExemplarBuffer, canonical: bool = False) -> Dataset:
    """Buffer contents as a Dataset; ``canonical`` orders rows by label then input values."""
    inputs, labels = buffer.inputs, buffer.labels
    if canonical:
        order = np.lexsort((*inputs.T[::-1], labels))
        inputs, labels = inputs[order], labels[order]
    return Dataset(inputs, labels)


@dataclass(frozen=True, eq=False)
class PrototypeSet:
    means: np.ndarray  # [K, F]
    counts: np.ndarray  # [K]; 0 marks an absent class

    @property
    def present(self) -> np.ndarray:
        return np.flatnonzero(self.counts > 0)


def prototype_update(
    prototypes: PrototypeSet | None,
    features: np.ndarray,
    labels: np.ndarray,
    num_classes: int | None = None,
) -> PrototypeSet:
    """Per-class centroids of ``features``; classes present in ``labels`` are (re)computed."""
    k = max(
        num_classes or 0,
        int(labels.max()) + 1 if len(labels) else 0,
        0 if prototypes is None else len(prototypes.counts),
    )
    means = np.zeros((k, features.shape[1]))
    counts = np.zeros(k, dtype=int)
    if prototypes is not None:
        means[: len(prototypes.counts)] = prototypes.means
        counts[: len(prototypes.counts)] = prototypes.counts
    for c in np.unique(labels):
        rows = labels == c
        means[c] = features[rows].mean(axis=0)
        counts[c] = int(rows.sum())
    return PrototypeSet(means, counts)


def recompute_from_buffer(buffer: ExemplarBuffer, params: ParamSet) -> PrototypeSet:
    """Prototypes from exemplars re-embedded with the current parameters."""
    if len(buffer) == 0:
        return PrototypeSet(np.zeros((params.num_classes, params.feature_dim)), np.zeros(params.num_classes, dtype=int))
    feats = buffer.inputs if buffer.mode == "feature" else extract_features(params, buffer.inputs)
    return prototype_update(None, feats, buffer.labels, params.num_classes)


def write_buffer_csv(buffer: ExemplarBuffer, path: str | Path) -> None:
    """Audit export: dataset columns followed by stored logits (blank when absent)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not buffer.entries:
        path.write_text("", encoding="utf-8")
        return
    dim = len(buffer.entries[0].input)
    width = max((len(e.logits) for e in buffer.entries if e.logits is not None), default=0)
    with path.open("w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow([f"f{i}" for i in range(dim)] + ["label"] + [f"logit{i}" for i in range(width)])
        for e in buffer.entries:
            logits = [] if e.logits is None else [repr(float(v)) for v in e.logits]
            logits += [""] * (width - len(logits))
            writer.writerow([repr(float(v)) for v in e.input] + [e.label] + logits)
