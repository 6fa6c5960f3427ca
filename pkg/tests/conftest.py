import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from metahar.encoder import EncoderConfig  # noqa: E402
from metahar.heads import HeadsConfig  # noqa: E402

torch.set_num_threads(1)


@pytest.fixture
def tiny_encoder():
    return EncoderConfig(seq_len=16, patch_len=4, stride=4, n_channels=2, n_layers=1, n_heads=2, d_model=8,
                         dropout=0.0, conv_kernel=8, conv_out_channels=4)


@pytest.fixture
def tiny_heads():
    return HeadsConfig(n_classes=3, proj_width=4, cls_widths=(4,), tau=0.5, eta=0.2)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, printed after the run regardless of capture
CRITERIA: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(CRITERIA, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
