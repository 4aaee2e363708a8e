import warnings

import numpy as np
import pytest

from qdit.model import DiffusionSchedule, ToyDiTConfig, init_random
from qdit.quantizer import GroupSizeClampedWarning

# a model small enough for per-test sampling runs
TINY = dict(hidden_dim=32, heads=2, blocks=1, timestep_embed_dim=16)


@pytest.fixture
def tiny_cfg():
    return ToyDiTConfig(seed=3, **TINY)


@pytest.fixture
def tiny_model(tiny_cfg):
    return init_random(tiny_cfg)


@pytest.fixture
def tiny_schedule():
    return DiffusionSchedule(steps=4)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _quiet_clamping():
    # patch_embed has d_in = 4, so most group sizes clamp there
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", GroupSizeClampedWarning)
        yield


# ---------------------------------------------------------------- acceptance report

_ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def report():
    """Record one PASS/FAIL line for an acceptance criterion and return the verdict."""

    def _report(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        _ACCEPTANCE[number] = line
        print(line)
        return ok

    return _report


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[number])
