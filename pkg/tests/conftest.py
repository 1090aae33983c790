import sys
from pathlib import Path

import numpy as np
import pytest

_REFINEMENT_DIR = Path(__file__).resolve().parents[1] / "RefinementManager"
if str(_REFINEMENT_DIR) not in sys.path:
    sys.path.insert(0, str(_REFINEMENT_DIR))

from schema import load_model, load_spec  # noqa: E402

FIXTURES = _REFINEMENT_DIR / "fixtures"


@pytest.fixture
def fixtures_dir() -> Path:
    return FIXTURES


@pytest.fixture
def party2():
    return load_model(FIXTURES / "party2.model")


@pytest.fixture
def party3():
    return load_model(FIXTURES / "party3.model")


@pytest.fixture
def spec_for():
    def load(name, model):
        return load_spec(FIXTURES / name, model)

    return load


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
