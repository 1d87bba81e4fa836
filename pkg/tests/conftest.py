import numpy as np
import pytest

from patchswap.data import GlyphSpec, gen_two_part_glyphs
from patchswap.model import ModelSpec

TINY_MODEL = ModelSpec(in_channels=1, num_classes=4, widths=(4, 6), pool_after=(1, 2))
TINY_GLYPHS = GlyphSpec(num_classes=4, image_size=16, cell=8, train_per_class=12, test_per_class=6, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def tiny_data():
    return gen_two_part_glyphs(TINY_GLYPHS)


# one line per acceptance criterion, echoed at the end of the run
ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def criterion():
    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE[number] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[number])
