import time

import numpy as np
import pytest
from hypothesis import settings

from segaudit.phantoms import build_corpus, build_reference_db, run_grid
from segaudit.registration import RegistrationConfig

settings.register_profile("ci", max_examples=25, deadline=None, derandomize=True)
settings.load_profile("ci")

ACCEPTANCE_SEED = 20240917
ACCEPTANCE_N_CASES = 40
ACCEPTANCE_N_REFERENCES = 12
ACCEPTANCE_K = 5


@pytest.fixture(scope="session")
def acceptance_grid():
    """The full 144-cell grid on 40 phantoms, shared by the acceptance tests.

    Returns (grid, wall_seconds, workers).
    """
    corpus = build_corpus(ACCEPTANCE_N_CASES, size=64, seed=ACCEPTANCE_SEED)
    db = build_reference_db(ACCEPTANCE_N_REFERENCES, size=64, seed=ACCEPTANCE_SEED)
    workers = 8
    start = time.perf_counter()
    grid = run_grid(
        corpus,
        db,
        k=ACCEPTANCE_K,
        cfg=RegistrationConfig(),
        seed=ACCEPTANCE_SEED,
        workers=workers,
    )
    elapsed = time.perf_counter() - start
    return grid, elapsed, workers


@pytest.fixture(scope="session")
def small_grid():
    """A cheaper grid for module-level example tests."""
    corpus = build_corpus(16, size=64, seed=5)
    db = build_reference_db(10, size=64, seed=5)
    return run_grid(corpus, db, k=3, cfg=RegistrationConfig(), seed=7, workers=8)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
