import pytest

from ektm.config import Config
from ektm.data import gen_synthetic, split_chrono

TINY = {
    "backbone.expert_hidden": [4],
    "backbone.tower_hidden": [4, 3],
    "backbone.embed_dim": 2,
    "backbone.experts": 2,
    "transfer.heads": 2,
    "data.samples": 400,
    "data.rank": 4,
    "data.n_users": 20,
    "data.n_items": 20,
    "data.tasks": ["sequential", "parallel"],
    "data.task_rates": [0.3, 0.3],
    "data.click_rate": 0.3,
    "train.batch": 64,
    "train.epochs": 2,
}


def tiny_config(**overrides) -> Config:
    return Config(TINY).update_from({k.replace("__", "."): v for k, v in overrides.items()})


@pytest.fixture
def tiny_cfg():
    return tiny_config()


@pytest.fixture(scope="session")
def tiny_splits():
    return split_chrono(gen_synthetic(tiny_config().synthetic()))
