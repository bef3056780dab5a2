"""
Shared fixtures
"""

import numpy as np
import pytest

from anchorlab import BlobSpec, generate_closed_form, synth_blobs


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def etf10():
    """Closed-form simplex ETF, k=10 in d=16"""
    return generate_closed_form(10, 16)


@pytest.fixture
def small_blobs():
    """Well separated 4-class blobs in 8 dimensions"""
    return synth_blobs(BlobSpec(k=4, m=8, per_class=30, center_scale=6.0, noise_sigma=0.5, seed=3))
