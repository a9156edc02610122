import numpy as np
import pytest

from models.experiment import BaselineSpec, DatasetSpec, ExperimentConfig
from models.network import TrainConfig
from services.data_service import gen_two_gaussians, split


@pytest.fixture
def rng():
    return np.random.default_rng(42)


@pytest.fixture
def toy_split():
    """200 train / 100 test points of the noisy two-Gaussian problem"""
    return split(gen_two_gaussians(300, 0.1, seed=3), 1.0 / 3.0, seed=5)


@pytest.fixture
def small_train_config():
    return TrainConfig(hidden_sizes=[8], epochs=3, batch_size=32, lr=0.01, seed=0, prelim_seed=1)


@pytest.fixture
def small_experiment():
    return ExperimentConfig(
        dataset=DatasetSpec(kind='two_gaussians', n=120, flip_fraction=0.1, seed=3, split_seed=1),
        method=BaselineSpec('control'),
        name='small',
        hidden_sizes=[8],
        epochs=2,
        batch_size=32,
        lr=0.01,
        n_runs=5,
        base_seed=0,
        prelim_seed=99
    )


@pytest.fixture
def experiment_file(tmp_path):
    """Writes an INI experiment file and returns its path"""
    def write(body: str, name: str = 'experiment.ini') -> str:
        path = tmp_path / name
        path.write_text(body, encoding='utf-8')
        return str(path)
    return write
