import math

import numpy as np
import pytest

from dpvar.configs import Config, Pool, ScoredConfig

# (b, T, eta) of the 23-configuration small-model grid; clipping norm 0.5.
SMALL_MODEL_GRID = [
    (8192, 1000, 3e-3), (8192, 500, 3e-3), (8192, 250, 3e-3), (8192, 125, 3e-3),
    (4096, 500, 3e-3), (4096, 250, 3e-3), (4096, 125, 3e-3),
    (2048, 1000, 3e-3), (2048, 500, 3e-3), (2048, 250, 3e-3), (2048, 125, 3e-3),
    (1024, 1000, 3e-3), (1024, 500, 3e-3), (1024, 250, 3e-3), (1024, 125, 3e-3),
    (8192, 250, 1e-3), (8192, 250, 1.5e-3), (8192, 250, 2e-3), (8192, 250, 4e-3), (8192, 250, 6e-3),
    (4096, 500, 1.5e-3), (4096, 250, 1.5e-3), (4096, 250, 6e-3),
]

PLANTED = (0.13, 0.37, 0.51)


def small_model_configs():
    return [Config(b, T, eta, 0.5) for b, T, eta in SMALL_MODEL_GRID]


def planted_score(c: Config, coefs=PLANTED) -> float:
    return coefs[0] * math.log(c.b) + coefs[1] * math.log(c.steps) + coefs[2] * math.log(c.eta)


def random_pool(rng: np.random.Generator, size: int, std: float = 0.0, seeds: int = 4) -> Pool:
    """Distinct random configs with positive scores and random utilities."""
    seen = {}
    while len(seen) < size:
        c = Config(int(2 ** rng.integers(8, 14)), int(rng.choice([125, 250, 500, 1000])), float(rng.choice([1e-3, 2e-3, 3e-3, 4e-3])))
        seen.setdefault(c.key, c)
    entries = [
        ScoredConfig(
            c,
            float(rng.uniform(2.0, 3.0)),
            float(rng.uniform(0.5, 1.0)),
            std,
            std if seeds > 1 else 0.0,
            seeds if std > 0 else 1,
        )
        for c in seen.values()
    ]
    return Pool(entries)


@pytest.fixture
def rng():
    return np.random.default_rng(20241018)
