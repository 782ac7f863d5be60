import numpy as np

# Fixed stream ids: one master seed fans out into independent generators.
STREAMS = {
    "data": 1,
    "class_order": 2,
    "init": 3,
    "shuffle": 4,
    "augment": 5,
    "reservoir": 6,
    "outlier": 7,
    "replay": 8,
    "fisher": 9,
    "external": 10,
    "mixing": 11,
    "oe_batch": 12,
    "branch": 13,
    "split": 14,
}


def make_rng(seed: int, stream: str) -> np.random.Generator:
    """Return the generator for ``stream`` derived from the master ``seed``."""
    if stream not in STREAMS:
        raise KeyError(f"Unknown RNG stream {stream!r}")
    return np.random.default_rng([seed, STREAMS[stream]])
