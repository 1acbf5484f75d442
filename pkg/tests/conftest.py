import numpy as np
import pytest
import torch

from framers.clipio import ClipSpec
from framers.patchcube import ModelConfig

# Toy preset dimensions used across the suite.
TOY = ModelConfig(
    height=64, width=64, spatial_patch=8, embed_dim=96, encoder_depth=4, encoder_heads=4,
    decoder_dim=48, decoder_depth=2, decoder_heads=4,
)
# Smallest config that still has 8 temporal slots (28 keep-2 classes).
MICRO = ModelConfig(
    height=16, width=16, spatial_patch=8, embed_dim=16, encoder_depth=1, encoder_heads=2,
    decoder_dim=8, decoder_depth=1, decoder_heads=2, mlp_ratio=2.0,
)


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)


@pytest.fixture
def toy():
    return TOY


@pytest.fixture
def micro():
    return MICRO


@pytest.fixture
def toy_spec():
    return ClipSpec(height=64, width=64)


# One summary line per acceptance criterion, printed after the run.
_ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def criterion():
    def record(number: int, ok: bool, detail: str) -> bool:
        _ACCEPTANCE[number] = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(_ACCEPTANCE[number])
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[n])
