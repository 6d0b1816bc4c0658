import numpy as np
import pytest
from src.errors import ConfigError
from src.rng import derive_stream


def test_same_triple_same_sequence():
    first = derive_stream(42, "laser", 3).generator.random(5)
    second = derive_stream(42, "laser", 3).generator.random(5)
    np.testing.assert_array_equal(first, second)


def test_distinct_triples_differ():
    base = derive_stream(42, "laser", 0).generator.random(5)
    assert not np.array_equal(base, derive_stream(42, "laser", 1).generator.random(5))
    assert not np.array_equal(base, derive_stream(42, "bag", 0).generator.random(5))
    assert not np.array_equal(base, derive_stream(43, "laser", 0).generator.random(5))


def test_child_stream_folds_purpose():
    child = derive_stream(1, "macro", 2).child("bag", 1)
    assert child.purpose == "macro/bag"
    assert child.index == 1
    np.testing.assert_array_equal(child.generator.random(3), derive_stream(1, "macro/bag", 1).generator.random(3))


def test_seed_is_required():
    with pytest.raises(ConfigError):
        derive_stream(None, "laser")
    with pytest.raises(ConfigError):
        derive_stream(-1, "laser")
