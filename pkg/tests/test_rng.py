"""Keyed deterministic RNG streams."""
import numpy as np
import pytest

from fedbayes import rng


def test_same_key_same_stream():
    a = rng.stream(7, rng.UPDATE, 3, 12).standard_normal(16)
    b = rng.stream(7, rng.UPDATE, 3, 12).standard_normal(16)
    assert np.array_equal(a, b)


def test_different_namespaces_differ():
    a = rng.stream(7, rng.UPDATE, 3, 12).standard_normal(16)
    b = rng.stream(7, rng.SELECT, 3, 12).standard_normal(16)
    assert not np.array_equal(a, b)


def test_different_path_components_differ():
    a = rng.stream(7, rng.UPDATE, 3, 12).standard_normal(16)
    b = rng.stream(7, rng.UPDATE, 4, 12).standard_normal(16)
    c = rng.stream(7, rng.UPDATE, 3, 13).standard_normal(16)
    assert not np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_empty_path_allowed():
    a = rng.stream(5).standard_normal(4)
    b = rng.stream(5).standard_normal(4)
    assert np.array_equal(a, b)


def test_negative_seed_rejected():
    with pytest.raises(ValueError):
        rng.stream(-1)


def test_namespace_tags_distinct():
    tags = [
        rng.UPDATE,
        rng.SELECT,
        rng.INIT_GLOBAL,
        rng.INIT_PERSONAL,
        rng.PARTITION,
        rng.PLAN,
        rng.DATA,
        rng.PREDICT,
    ]
    assert len(set(tags)) == len(tags)
