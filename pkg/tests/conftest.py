import numpy as np
import pytest
from hypothesis import HealthCheck, settings

# Episode-scale cases legitimately take seconds; the deadline heuristic only
# produces flaky failures here.
settings.register_profile(
    "travseg",
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
    max_examples=25,
)
settings.load_profile("travseg")


@pytest.fixture
def rng():
    return np.random.default_rng(0)
