import numpy as np
import pytest

from tiltflow.rng import as_generator, substream
from tiltflow.validation import check_finite, check_points, check_positive, check_time


def test_substreams_are_independent_and_reproducible():
    a = substream(1, "x", 0).standard_normal(5)
    assert np.array_equal(a, substream(1, "x", 0).standard_normal(5))
    assert not np.array_equal(a, substream(1, "x", 1).standard_normal(5))
    assert not np.array_equal(a, substream(1, "y", 0).standard_normal(5))
    assert not np.array_equal(a, substream(2, "x", 0).standard_normal(5))
    with pytest.raises(ValueError):
        substream(None)


def test_as_generator():
    g = np.random.default_rng(0)
    assert as_generator(g) is g
    assert np.array_equal(as_generator(4, "t").random(3), substream(4, "t").random(3))


def test_checks():
    assert check_points([1.0, 2.0], 2).shape == (1, 2)
    with pytest.raises(ValueError):
        check_points(np.ones((2, 3)), 2)
    with pytest.raises(ValueError):
        check_points([[np.nan, 0.0]])
    with pytest.raises(ValueError):
        check_time(1.2)
    with pytest.raises(ValueError):
        check_positive(0.0, "eta")
    with pytest.raises(FloatingPointError):
        check_finite(np.array([np.inf]), "boom")
