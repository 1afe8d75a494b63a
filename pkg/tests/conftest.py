import numpy as np
import pytest

from lgc3d.densenet import ModelConfig
from lgc3d.densenet import build_model
from lgc3d.hsi import save_cube
from lgc3d.hsi import stratified_split
from lgc3d.hsi import synth_cube
from lgc3d.utils import CheckConfig


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def check_config():
    return CheckConfig(seed=0, instances=2, layers=2, chains=2, inputs=2)


@pytest.fixture
def small_cube():
    return synth_cube(size=12, bands=8, classes=3, noise=0.05, seed=1)


@pytest.fixture
def tiny_config():
    return ModelConfig(
        name="tiny",
        stage_blocks=[1, 1],
        growth_rate=2,
        groups=2,
        num_classes=3,
        bands=8,
        patch_size=5,
    )


@pytest.fixture
def tiny_model(tiny_config):
    return build_model(tiny_config, np.random.default_rng(0))


@pytest.fixture
def small_split(small_cube):
    return stratified_split(small_cube, (6, 1, 3), seed=0)


@pytest.fixture
def cube_file(tmp_path, small_cube):
    path = tmp_path / "cube.hsi"
    save_cube(small_cube, path)
    return path
