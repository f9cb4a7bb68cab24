from __future__ import annotations

import numpy as np

from flatnas.seeding import derive_seed, stable_hash, substream


def test_stable_hash_is_fixed_across_runs():
    # frozen value; changing it silently re-seeds every stored experiment
    assert stable_hash("oracle", "skip|skip|skip", 0) == 3449469409236534391
    assert 0 <= stable_hash("x") < 2**63


def test_keys_are_not_concatenated_ambiguously():
    assert stable_hash("ab", "c") != stable_hash("a", "bc")
    assert stable_hash(1) != stable_hash("1")


def test_derive_seed_without_keys_is_root():
    assert derive_seed(17) == 17


def test_named_streams_are_independent():
    a = substream(0, "flatness").random(5)
    b = substream(0, "evolution").random(5)
    assert not np.array_equal(a, b)
    np.testing.assert_array_equal(a, substream(0, "flatness").random(5))
