from __future__ import annotations

import numpy as np
import pytest

from flatnas.data import make_blobs, make_spirals
from flatnas.searchspace import SearchSpaceSpec, micro_space


@pytest.fixture(scope="session")
def micro():
    return micro_space()


@pytest.fixture(scope="session")
def small_space():
    # every op type on a 3-node cell, narrow enough for finite differences
    return SearchSpaceSpec(
        node_count=3,
        edges=((0, 1), (0, 2), (1, 2)),
        op_names=("zeroize", "skip", "linear", "relu_linear", "scale"),
        cells_per_network=2,
        channels=4,
        name="small",
    )


@pytest.fixture(scope="session")
def spirals():
    return make_spirals()


@pytest.fixture(scope="session")
def tiny_data():
    return make_blobs(classes=3, per_class=12, input_dim=5, seed=1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
