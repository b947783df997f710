import numpy as np
import pytest

from ecotopics.corpus import ObservationCorpus
from ecotopics.evaluation import synthetic_corpus


def consecutive_dates(n, start="2009-01-01"):
    return np.datetime64(start, "D") + np.arange(n)


@pytest.fixture
def tiny_corpus():
    return ObservationCorpus(consecutive_dates(2), [[2, 1], [0, 4]], ["a", "b"])


@pytest.fixture(scope="session")
def small_synthetic():
    """Two-year seasonal corpus, small enough for unit tests."""
    return synthetic_corpus(K_true=3, T=400, V=10, obs_per_day=60, seed=11)
