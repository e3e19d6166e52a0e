import pytest

from saliteach.data import PlantedTaskSpec, generate_planted_dataset
from saliteach.loss import LossConfig, LossKind
from saliteach.saliency import RiseConfig
from saliteach.training import TrainConfig

TINY_SPLITS = (16, 16, 32, 16)


@pytest.fixture(scope="session")
def tiny_spec():
    return PlantedTaskSpec(num_per_split=TINY_SPLITS, seed=3)


@pytest.fixture(scope="session")
def tiny_bundle(tiny_spec):
    return generate_planted_dataset(tiny_spec)


@pytest.fixture
def tiny_train():
    return TrainConfig(
        max_epochs=2,
        base_lr=0.05,
        momentum=0.9,
        batch_size=8,
        loss=LossConfig(LossKind.CYBORG, 0.5),
    )


@pytest.fixture
def tiny_rise():
    return RiseConfig(num_masks=20, grid_size=4, batch_size=20)
