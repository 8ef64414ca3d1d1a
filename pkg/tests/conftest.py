import json
from pathlib import Path

import numpy as np
import pytest

from testletirt.model import TestletDesign

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture(scope="session")
def table6():
    doc = json.loads((FIXTURES / "table6.json").read_text())
    doc["design"] = TestletDesign.from_testlets(19, doc["passages"])
    return doc


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
