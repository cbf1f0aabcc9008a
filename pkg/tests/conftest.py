import numpy as np
import pytest

from musenet import dataset as D


@pytest.fixture(scope="session")
def small_spec():
    return D.DatasetSpec(train_ids=8, test_ids=4, views_per_id=4,
                         image_size=32, distractor_ids=3, seed=7)


@pytest.fixture(scope="session")
def small_dataset(small_spec, tmp_path_factory):
    root = tmp_path_factory.mktemp("data") / "small"
    D.generate_dataset(small_spec, root)
    return D.SyntheticDataset(root)
