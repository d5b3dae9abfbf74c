import numpy as np
import pytest

from land_use_planner.citysynth import generate_dataset
from land_use_planner.config import RunConfig


@pytest.fixture(scope="session")
def tiny_dataset():
    """K=64, N=5, M=2"""
    return generate_dataset(7, 64, 5, 2)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config(tmp_path) -> RunConfig:
    return RunConfig(
        grid_size=5,
        num_zones=2,
        num_samples=60,
        seed=3,
        workers=2,
        lda_iterations=30,
        embed_dim=4,
        encoder_hidden=8,
        heads=4,
        noise_dim=4,
        gan_hidden=16,
        epochs_encoder=3,
        epochs_gan=3,
        epochs_grid=5,
        lr_grid=0.05,
        sweep_sizes=(3, 4),
        sweep_samples=20,
        sweep_epochs=1,
        data_dir=str(tmp_path / "data"),
        run_dir=str(tmp_path / "run"),
    )
