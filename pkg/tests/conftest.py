import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from fixture_gen import make_places_dataset, split_database_query  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def places_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("places")
    manifest = make_places_dataset(root, n_places=12, views_per_place=2,
                                   size=48, seed=7)
    return root, manifest


@pytest.fixture(scope="session")
def places_split(places_dir):
    _, manifest = places_dir
    return split_database_query(manifest)
