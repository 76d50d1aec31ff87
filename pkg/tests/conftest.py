import numpy as np
import pytest
import torch

from cupi.data import LabeledDataset


def make_dataset(n=40, shape=(8, 8, 1), k=4, seed=0, tag="authorized"):
    rng = np.random.default_rng(seed)
    images = rng.uniform(0, 1, size=(n, *shape)).astype(np.float32)
    labels = np.arange(n) % k
    return LabeledDataset(images, labels, np.arange(n), tag, k)


@pytest.fixture
def tiny_ds():
    return make_dataset()


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)
    yield


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
