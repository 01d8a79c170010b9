import numpy as np
import pytest

from glioworld.cohort import generate_cohort
from glioworld.config import CohortConfig


@pytest.fixture(scope="session")
def small_cohort():
    """Four-subject 32-cube cohort shared by read-only tests."""
    return generate_cohort(7, CohortConfig(n_subjects=4))


@pytest.fixture(scope="session")
def small_cohort_cfg():
    return CohortConfig(n_subjects=4)


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
