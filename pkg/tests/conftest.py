import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from enerprune import evaluate
from enerprune.toydata import build_toy_cnn, generate_dataset, train_toy_cnn

SEED = 20240817


@pytest.fixture(scope="session")
def toy_dataset():
    return generate_dataset(200, seed=SEED)


@pytest.fixture(scope="session")
def trained_baseline(toy_dataset):
    """One trained toy CNN shared by the expensive end-to-end tests."""
    rng = np.random.default_rng(SEED)
    net = build_toy_cnn(rng)
    train_toy_cnn(net, toy_dataset, rng, epochs=30)
    top1, _ = evaluate(
        net,
        toy_dataset.images[toy_dataset.val_idx],
        toy_dataset.labels[toy_dataset.val_idx],
    )
    return net, top1
