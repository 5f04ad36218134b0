import json
import os
from pathlib import Path

import pytest
import torch

from amptrojan.core import ImageBatch, InputTransformer
from amptrojan.data import Dataset

DESK_DIR = Path(__file__).parent / "data" / "desk"


def pytest_configure(config):
    torch.manual_seed(0)


@pytest.fixture
def gen():
    return torch.Generator().manual_seed(0)


class TinyTarget(torch.nn.Module):
    """Two conv-free layers so gradients are cheap and smooth-ish."""

    def __init__(self, in_features=16, num_classes=4, seed=0):
        super().__init__()
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.fc1 = torch.nn.Linear(in_features, 32)
            self.fc2 = torch.nn.Linear(32, num_classes)
        self.num_classes = num_classes

    def forward(self, x):
        return self.fc2(torch.tanh(self.fc1(x.flatten(1))))


class ShiftTransformer(InputTransformer):
    """Adds a fixed tensor when switched on; used as a hand oracle."""

    def __init__(self, shift):
        super().__init__()
        self.register_buffer("shift", shift)

    def transform(self, x):
        return x + self.shift


@pytest.fixture
def tiny_target():
    return TinyTarget().eval()


def make_batch(n=8, shape=(1, 4, 4), num_classes=4, seed=0):
    g = torch.Generator().manual_seed(seed)
    return ImageBatch(
        torch.rand(n, *shape, generator=g),
        torch.randint(0, num_classes, (n,), generator=g),
    )


def make_dataset(n=64, shape=(1, 8, 8), num_classes=10, seed=0, name="synthetic"):
    g = torch.Generator().manual_seed(seed)
    return Dataset(
        name, "test",
        torch.randint(0, 256, (n, *shape), dtype=torch.uint8, generator=g),
        torch.randint(0, num_classes, (n,), generator=g),
        num_classes=num_classes,
    )


@pytest.fixture
def batch():
    return make_batch()


@pytest.fixture
def dataset():
    return make_dataset()


@pytest.fixture(scope="session")
def mnist_test():
    """Real MNIST test split from the configured cache; skip when the data
    cannot be obtained (offline host with an empty cache)."""
    from amptrojan.core import DatasetError
    from amptrojan.data import load_dataset

    try:
        return load_dataset("mnist", "test")
    except DatasetError as exc:
        pytest.skip(f"mnist unavailable: {exc}")


@pytest.fixture(scope="session")
def mnist_train():
    from amptrojan.core import DatasetError
    from amptrojan.data import load_dataset

    try:
        return load_dataset("mnist", "train")
    except DatasetError as exc:
        pytest.skip(f"mnist unavailable: {exc}")


def load_desk(name):
    """Frozen metrics from the seeded desk-profile runs (see recipes/)."""
    path = DESK_DIR / name
    if not path.exists():
        pytest.skip(
            f"desk artifact {name} missing; regenerate with the recipes/ "
            "commands and copy the metrics into tests/data/desk/"
        )
    with open(path) as fh:
        return json.load(fh)
