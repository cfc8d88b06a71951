import numpy as np
import pytest

from lambdatune.backends import DEMO_CLIP, SyntheticEncoder, synthetic_corpus
from lambdatune.bd_metrics import RDCurve, RDPoint


@pytest.fixture
def backend():
    return SyntheticEncoder()


@pytest.fixture
def demo_clip():
    return DEMO_CLIP


@pytest.fixture
def small_corpus():
    return synthetic_corpus(8, seed=99)


def make_curve(rates, quals) -> RDCurve:
    return RDCurve(tuple(RDPoint(float(r), float(q)) for r, q in zip(rates, quals)))


@pytest.fixture
def simple_curve():
    return make_curve([1000, 2000, 4000, 8000, 16000], [32.0, 35.0, 38.0, 41.0, 44.0])


def random_curve(rng: np.random.Generator, n: int | None = None) -> RDCurve:
    """A valid monotone RD curve with well-separated points."""
    if n is None:
        n = int(rng.integers(4, 9))
    rates = np.exp(np.cumsum(rng.uniform(0.3, 1.0, n))) * rng.uniform(100, 1000)
    quals = np.cumsum(rng.uniform(0.8, 3.0, n)) + rng.uniform(25, 32)
    return make_curve(rates, quals)
