"""Class-incremental task streams from synthetic generators or CSV feature tables."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from cloodbench.errors import ConfigError, DatasetParseError
from cloodbench.models.experiment import StreamConfig
from cloodbench.services.seeding import make_rng

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class Dataset:
    inputs: np.ndarray  # [n, D]
    labels: np.ndarray  # [n]

    def __post_init__(self) -> None:
        if self.inputs.ndim != 2 or len(self.inputs) != len(self.labels):
            raise ConfigError(f"inputs {self.inputs.shape} and labels {self.labels.shape} are not aligned")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    @property
    def classes(self) -> np.ndarray:
        return np.unique(self.labels)

    def take(self, index: np.ndarray) -> Dataset:
        return Dataset(self.inputs[index], self.labels[index])

    @staticmethod
    def concat(parts: list[Dataset]) -> Dataset:
        parts = [p for p in parts if len(p)]
        if not parts:
            raise ConfigError("cannot concatenate an empty list of datasets")
        return Dataset(
            np.concatenate([p.inputs for p in parts]),
            np.concatenate([p.labels for p in parts]),
        )


@dataclass(frozen=True, eq=False)
class OutlierSet:
    inputs: np.ndarray  # [m, D]

    def __len__(self) -> int:
        return len(self.inputs)


@dataclass(frozen=True, eq=False)
class TaskStream:
    train: tuple[Dataset, ...]
    test: tuple[Dataset, ...]
    class_order: np.ndarray  # class_order[i] = original label of remapped class i
    classes_per_task: tuple[int, ...]
    seed: int
    data_range: tuple[np.ndarray, np.ndarray]  # per-feature (min, max) of training inputs

    @property
    def num_tasks(self) -> int:
        return len(self.train)

    def task_classes(self, b: int) -> np.ndarray:
        start = sum(self.classes_per_task[:b])
        return np.arange(start, start + self.classes_per_task[b])

    def classes_up_to(self, b: int) -> int:
        """Number of classes introduced by tasks 0..b."""
        return sum(self.classes_per_task[: b + 1])

    def test_union(self, tasks: range) -> Dataset:
        return Dataset.concat([self.test[j] for j in tasks])


def _stratified_split(
    labels: np.ndarray, rng: np.random.Generator, train_fraction: float = 0.8
) -> tuple[np.ndarray, np.ndarray]:
    train_idx, test_idx = [], []
    for c in np.unique(labels):
        rows = np.flatnonzero(labels == c)
        rows = rows[rng.permutation(len(rows))]
        cut = int(round(train_fraction * len(rows)))
        train_idx.append(np.sort(rows[:cut]))
        test_idx.append(np.sort(rows[cut:]))
    return np.concatenate(train_idx), np.concatenate(test_idx)


def gen_gaussian_tasks(
    num_classes: int, dim: int, per_class: int, separation: float, seed: int
) -> tuple[Dataset, Dataset]:
    """Isotropic unit-variance Gaussian blobs at seeded random directions scaled by ``separation``.

    Returns an 80/20 stratified (train, test) split.
    """
    if separation < 0:
        raise ConfigError(f"separation must be nonnegative, got {separation}")
    rng = make_rng(seed, "data")
    directions = rng.standard_normal((num_classes, dim))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    means = separation * directions

    labels = np.repeat(np.arange(num_classes), per_class)
    inputs = means[labels] + rng.standard_normal((len(labels), dim))
    train_idx, test_idx = _stratified_split(labels, rng)
    full = Dataset(inputs, labels)
    return full.take(train_idx), full.take(test_idx)


def class_means(dataset: Dataset) -> np.ndarray:
    return np.stack([dataset.inputs[dataset.labels == c].mean(axis=0) for c in dataset.classes])


def split_class_incremental(
    train: Dataset, test: Dataset, num_tasks: int, seed: int
) -> TaskStream:
    """Cut a labeled dataset into ``num_tasks`` disjoint-class tasks.

    Classes are visited in a seeded permutation and relabeled to their position
    in that order, so task b owns the contiguous label range of its classes.
    """
    classes = np.unique(np.concatenate([train.labels, test.labels]))
    if num_tasks <= 0 or len(classes) % num_tasks:
        raise ConfigError(f"{len(classes)} classes cannot be split evenly into {num_tasks} tasks")
    per_task = len(classes) // num_tasks

    class_order = classes[make_rng(seed, "class_order").permutation(len(classes))]
    remap = {int(c): i for i, c in enumerate(class_order)}

    def _relabel(ds: Dataset) -> Dataset:
        return Dataset(ds.inputs, np.array([remap[int(y)] for y in ds.labels], dtype=int))

    train, test = _relabel(train), _relabel(test)
    train_tasks, test_tasks = [], []
    for b in range(num_tasks):
        lo, hi = b * per_task, (b + 1) * per_task
        train_tasks.append(train.take(np.flatnonzero((train.labels >= lo) & (train.labels < hi))))
        test_mask = (test.labels >= lo) & (test.labels < hi)
        if not test_mask.any():
            raise ConfigError(f"task {b + 1} has an empty test set")
        test_tasks.append(test.take(np.flatnonzero(test_mask)))

    return TaskStream(
        train=tuple(train_tasks),
        test=tuple(test_tasks),
        class_order=class_order,
        classes_per_task=(per_task,) * num_tasks,
        seed=seed,
        data_range=(train.inputs.min(axis=0), train.inputs.max(axis=0)),
    )


def gen_outlier_set(
    dim: int,
    m: int,
    mode: str,
    seed: int,
    *,
    radius: float = 1.0,
    reserved: Dataset | None = None,
    stream: str = "outlier",
) -> OutlierSet:
    """Unlabeled outliers: points on a sphere shell, or reserved classes with labels stripped."""
    if mode == "uniform-shell":
        rng = make_rng(seed, stream)
        directions = rng.standard_normal((m, dim))
        norms = np.linalg.norm(directions, axis=1, keepdims=True)
        directions = directions / np.where(norms > 0, norms, 1.0)
        return OutlierSet(radius * directions)
    if mode == "held-out-classes":
        if reserved is None or len(reserved) == 0:
            raise ConfigError("held-out-classes outliers need a nonempty reserved class list")
        return OutlierSet(reserved.inputs.copy())
    raise ConfigError(f"unknown outlier mode {mode!r}")


def gen_mixing_source(dim: int, n: int, seed: int, octaves: int = 4) -> np.ndarray:
    """Seeded fractal-like noise fields over the feature axis, scaled to [-1, 1].

    Each row sums ``octaves`` layers of linearly interpolated random control
    points; octave o has 2**(o+1) control points and amplitude 0.5**o.
    """
    rng = make_rng(seed, "mixing")
    grid = np.linspace(0.0, 1.0, dim)
    fields = np.zeros((n, dim))
    for o in range(octaves):
        knots = np.linspace(0.0, 1.0, 2 ** (o + 1) + 1)
        values = rng.uniform(-1.0, 1.0, size=(n, len(knots)))
        fields += 0.5**o * np.stack([np.interp(grid, knots, row) for row in values])
    peak = np.abs(fields).max(axis=1, keepdims=True)
    return fields / np.where(peak > 0, peak, 1.0)


def load_csv(path: str | Path) -> Dataset:
    """Parse a ``f0,...,f{D-1},label`` table, preserving row order."""
    path = Path(path)
    if not path.exists():
        raise DatasetParseError(f"{path} does not exist")

    with path.open("r", encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if not header:
            raise DatasetParseError("missing header", line=1)
        dim = len(header) - 1
        expected = [f"f{i}" for i in range(dim)] + ["label"]
        if dim < 1 or [h.strip() for h in header] != expected:
            raise DatasetParseError(f"header must be {','.join(expected) if dim >= 1 else 'f0,...,label'}", line=1)

        rows: list[list[float]] = []
        labels: list[int] = []
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != dim + 1:
                raise DatasetParseError(f"expected {dim + 1} cells, found {len(row)}", line=line_no)
            try:
                values = [float(cell) for cell in row[:dim]]
                label = int(row[dim])
            except ValueError as exc:
                raise DatasetParseError(f"non-numeric cell ({exc})", line=line_no) from exc
            if label < 0:
                raise DatasetParseError(f"label {label} is negative", line=line_no)
            rows.append(values)
            labels.append(label)

    if not rows:
        raise DatasetParseError("empty dataset")
    inputs = np.array(rows, dtype=float)
    if not np.all(np.isfinite(inputs)):
        raise DatasetParseError("non-finite input values")
    return Dataset(inputs, np.array(labels, dtype=int))


def write_csv(dataset: Dataset, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow([f"f{i}" for i in range(dataset.dim)] + ["label"])
        for x, y in zip(dataset.inputs, dataset.labels, strict=True):
            writer.writerow([repr(float(v)) for v in x] + [int(y)])


@dataclass(frozen=True, eq=False)
class StreamBundle:
    stream: TaskStream
    reserved: Dataset | None  # held-out classes never shown as IND
    mean_norm: float  # largest class-mean norm of the IND training data


def generate_tables(cfg: StreamConfig, seed: int) -> tuple[Dataset, Dataset, Dataset | None]:
    """(train, test, reserved) tables before the class-incremental split.

    Reserved classes are generated alongside the IND classes and removed from
    both tables; they only ever serve as outliers.
    """
    if cfg.source == "csv":
        if not (cfg.train_csv and cfg.test_csv):
            raise ConfigError("csv source requires stream.train_csv and stream.test_csv")
        return load_csv(cfg.train_csv), load_csv(cfg.test_csv), None

    data_seed = cfg.seed if cfg.seed is not None else seed
    total = cfg.num_classes + cfg.reserved_classes
    train, test = gen_gaussian_tasks(total, cfg.dim, cfg.per_class, cfg.separation, data_seed)
    if not cfg.reserved_classes:
        return train, test, None
    held = np.arange(cfg.num_classes, total)
    reserved = train.take(np.flatnonzero(np.isin(train.labels, held)))
    train = train.take(np.flatnonzero(~np.isin(train.labels, held)))
    test = test.take(np.flatnonzero(~np.isin(test.labels, held)))
    return train, test, reserved


def build_stream(cfg: StreamConfig, seed: int) -> StreamBundle:
    """Materialize the configured task stream for one repetition."""
    train, test, reserved = generate_tables(cfg, seed)
    stream = split_class_incremental(train, test, cfg.num_tasks, seed)
    mean_norm = float(np.linalg.norm(class_means(train), axis=1).max())
    logger.info(
        "Built %d-task stream (%d classes, dim %d, class order seed %d)",
        stream.num_tasks,
        sum(stream.classes_per_task),
        train.dim,
        seed,
    )
    return StreamBundle(stream, reserved, mean_norm)
