import numpy as np
import pytest

from xraygpt.curation import CuratedRecord
from xraygpt.instruction import DEFAULT_INSTRUCTIONS, build_vocab


@pytest.fixture
def record():
    return CuratedRecord(
        id="r0",
        summary="the lungs are clear no acute process",
        image_refs=("img-0",),
    )


@pytest.fixture
def small_vocab(record):
    return build_vocab([record], DEFAULT_INSTRUCTIONS, max_size=64)


@pytest.fixture
def feature_vec():
    return np.random.default_rng(7).uniform(0.0, 1.0, size=64)
