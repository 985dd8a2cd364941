import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.join(os.path.dirname(os.path.abspath(__file__)), '..', 'script'))

from config import build_config  # noqa: E402


@pytest.fixture
def rng():
    return np.random.RandomState(0)


@pytest.fixture
def fast_config():
    """Desk configuration with a sparser GP refit cadence and no progress bar"""
    return build_config('desk', overrides={'progress': False,
                                           'gp': {'retrain_every': 10, 'budget': 30},
                                           'baseline_gp': {'enabled': True, 'retrain_every': 10}})
