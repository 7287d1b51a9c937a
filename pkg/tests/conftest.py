import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from featuretriage.data import SyntheticConfig, gen_synthetic, make_record

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture(scope="session")
def small_data():
    """(train, test) synthetic datasets small enough for quick episodes."""
    base = dict(n_activities=3, n_channels=6, length_range=(8, 14), span_frac=(0.5, 1.0))
    train = gen_synthetic(SyntheticConfig(**base, n_clips=60, seed=11, id_prefix="tr"))
    test = gen_synthetic(SyntheticConfig(**base, n_clips=30, seed=12, id_prefix="te"))
    return train, test


def toy_video(scores, label=0, id="v", **kw):
    return make_record(id, label, np.asarray(scores, dtype=float), **kw)
