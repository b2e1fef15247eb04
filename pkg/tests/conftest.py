import numpy as np
import pytest

from dfalign.cascade import TrainConfig
from dfalign.synth import GenerationConfig, generate_dataset, split


def small_train_config(**kw):
    base = dict(iterations=40, batch_size=8, learning_rate=0.01, t1=10, t2=30, n_clusters=4,
                channels=(4, 8), dense=16, log_every=10, val_every=20, kmeans_max_iter=50)
    return TrainConfig(**{**base, **kw})


@pytest.fixture(scope="session")
def small_splits():
    ds = generate_dataset(GenerationConfig(n_samples=90, image_size=32), seed=5)
    return split(ds, [60 / 90, 15 / 90, 15 / 90], seed=5)


@pytest.fixture(scope="session")
def small_cascade(small_splits):
    from dfalign.cascade import train_cascade
    train, val, _ = small_splits
    return train_cascade(train, small_train_config(), 3, val)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# one summary line per acceptance criterion, filled in by test_acceptance
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
