from __future__ import annotations

import numpy as np
import pytest
import torch

from jigsawcm.puzzle_io import quantize_8bit


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


def random_image(rng, h, w, c=3):
    return quantize_8bit(rng.random((h, w, c)))


# one line per acceptance criterion, printed after the test run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
