import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from leno.data import synth_generate  # noqa: E402
from leno.sodnet import ModelConfig, build_model  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_data():
    return synth_generate(16, 32, seed=7)


@pytest.fixture
def small_model():
    return build_model(ModelConfig(channels=4, height=32, width=32), seed=3)


@pytest.fixture
def ref_model():
    """Float64 model for gradient checks."""
    return build_model(ModelConfig(channels=4, height=16, width=16), seed=5, dtype=np.float64)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for key in sorted(results):
            terminalreporter.write_line(results[key])
