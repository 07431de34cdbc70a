import numpy as np
import pytest
from hypothesis import HealthCheck, settings

# Single-CPU container: generous deadlines, modest example counts.
settings.register_profile(
    "default",
    deadline=None,
    max_examples=30,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(0)
