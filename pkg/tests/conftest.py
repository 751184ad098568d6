import os

os.environ.setdefault("POL_DEBUG_CHECKS", "1")

import numpy as np
import pytest

import pol.tensor as tk

tk.DEBUG_CHECKS = True


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
