import os

import numpy as np
import pytest

# Keep artifacts out of the working tree and logs quiet
os.environ.setdefault("CLOODBENCH_LOG_LEVEL", "WARNING")
os.environ.setdefault("CLOODBENCH_MAX_WORKERS", "2")

from cloodbench.models.experiment import ExperimentConfig
from cloodbench.services.datastream import TaskStream, build_stream
from cloodbench.services.network import ParamSet, init_params


def random_params(rng: np.random.Generator, input_dim: int, hidden: list[int], num_classes: int) -> ParamSet:
    """Glorot backbone with a random (nonzero) head."""
    base = init_params(rng, input_dim, hidden)
    return ParamSet(
        base.branches,
        rng.normal(0.0, 0.5, size=(num_classes, base.feature_dim)),
        rng.normal(0.0, 0.1, size=num_classes),
    )


def tiny_config(**sections) -> ExperimentConfig:
    """A config small enough for a full run in about a second."""
    data = {
        "stream": {"num_classes": 4, "num_tasks": 2, "dim": 4, "per_class": 30, "reserved_classes": 2},
        "model": {"hidden": [8]},
        "optimizer": {"epochs": 2, "batch_size": 16, "milestones": []},
        "strategy": {"buffer_capacity": 20},
        "eval": {"external_count": 20},
        "detectors": ["msp", "energy"],
    }
    for name, values in sections.items():
        if isinstance(values, dict):
            data.setdefault(name, {}).update(values)
        else:
            data[name] = values
    return ExperimentConfig.model_validate(data)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def make_params():
    return random_params


@pytest.fixture
def small_cfg() -> ExperimentConfig:
    return tiny_config()


@pytest.fixture
def small_stream(small_cfg) -> TaskStream:
    return build_stream(small_cfg.stream, 0).stream


@pytest.fixture(scope="session")
def make_config():
    return tiny_config
