import numpy as np
import pytest

from trisr.schemas import TrainingConfig
from trisr.synthetic import make_phantom
from trisr.tensor import Tensor
from trisr.volume_io import Volume


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_config():
    """Tiny networks so a training step takes well under a second."""
    return TrainingConfig(
        total_iters=4,
        batch_size=2,
        window=16,
        stride=8,
        base_channels=4,
        growth_channels=2,
        num_rrdb=1,
        critic_stages="4:2,8:2",
        fe_base_channels=2,
        checkpoint_every=0,
        seed=7,
    )


@pytest.fixture
def phantom_32():
    return make_phantom((32, 32, 32), seed=3)


def random_volume(rng, dims=(6, 5, 4), spacing=(1.0, 1.0, 1.0)) -> Volume:
    w, h, d = dims
    return Volume(rng.random((d, h, w)).astype(np.float32), spacing)


def leaf(rng, shape, away_from_zero: bool = False) -> Tensor:
    """float64 leaf tensor; optionally kept clear of the kink at 0."""
    data = rng.standard_normal(shape)
    if away_from_zero:
        data = np.sign(data) * (0.1 + np.abs(data))
    return Tensor(data, requires_grad=True, dtype=np.float64)
