import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from stcloud.imagecore import MultispectralImage  # noqa: E402


def const_image(value, h=16, w=16, c=3):
    return MultispectralImage(np.full((h, w, c), value, dtype=np.uint8))


@pytest.fixture(scope="session")
def small_synth(tmp_path_factory):
    """20 synthetic 64x64 groups with T=3, shared by several modules' tests."""
    from stcloud.synthgen import synth_dataset

    out = tmp_path_factory.mktemp("synth20")
    return out, synth_dataset(20, 3, 64, 7, out)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in LINES:
            terminalreporter.write_line(line)
