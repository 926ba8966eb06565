import math
import time

import numpy as np
import pytest
import torch

from stochpsr.core import OrientedPointCloud, RunConfig
from stochpsr.training import train


def unit_circle(n=64, start=0.0, stop=2 * math.pi):
    t = np.linspace(start, stop, n, endpoint=False)
    p = np.stack([np.cos(t), np.sin(t)], 1)
    return OrientedPointCloud(p, p)


# desk-scale setting shared by the end-to-end checks: paper defaults except the
# network width (64 instead of 512) and a larger step (1e-3) for the short run
CIRCLE_CONFIG = RunConfig(d=2, samples_per_epoch=10_000, epochs=50, hidden_width=64, learning_rate=1e-3, seed=0)


@pytest.fixture(scope="session")
def trained_circle():
    """Criterion-5 model: 64-point unit circle, 10^4 samples per epoch, 50 epochs, seed 0."""
    torch.set_num_threads(1)
    start = time.perf_counter()
    implicit = train(unit_circle(64), CIRCLE_CONFIG)
    implicit.train_seconds = time.perf_counter() - start
    return implicit


def pytest_terminal_summary(terminalreporter):
    from acceptance_report import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(LINES):
            terminalreporter.write_line(line)
