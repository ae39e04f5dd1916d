import numpy as np
import pytest

from src.domain.models.experiment import ExperimentConfig
from src.domain.models.scene import SceneConstraints
from src.infrastructure.data.dataset_builder import DatasetBuilder
from tests.factories import TINY, make_model


@pytest.fixture
def tiny_config(tmp_path):
    return ExperimentConfig(data_dir=str(tmp_path / "data"), out_dir=str(tmp_path / "results"),
                            seeds=(0,), train_size=8, eval_size=4, min_objects=2, max_objects=3,
                            diagnostic_items=4, hyper=TINY)


@pytest.fixture
def tiny_data(tiny_config):
    DatasetBuilder(tiny_config.data_dir).build(
        tiny_config.data_seed, tiny_config.train_size, tiny_config.eval_size, tiny_config.tasks,
        SceneConstraints(min_objects=tiny_config.min_objects, max_objects=tiny_config.max_objects),
        TINY.grid, TINY.image_size)
    return tiny_config


@pytest.fixture
def tiny_model():
    return make_model()


@pytest.fixture
def tiny_model64():
    return make_model(dtype=np.float64)


@pytest.fixture
def rng_np():
    return np.random.default_rng(0)
