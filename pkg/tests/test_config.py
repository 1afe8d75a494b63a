import pytest

from lgc3d.config import load_config
from lgc3d.config import read_config_file
from lgc3d.config import validate_config
from lgc3d.densenet import ModelConfig
from lgc3d.training import TrainConfig
from lgc3d.utils import ConfigurationError


def test_toml_model_config(tmp_path):
    """Test that a TOML model description is loaded and its schedule derived."""
    path = tmp_path / "model.toml"
    path.write_text('name = "mine"\nstage_blocks = [2, 2]\ngrowth_rate = 4\ngroups = 2\nbands = 10\n')
    config = load_config(ModelConfig, path)
    assert config.name == "mine"
    assert config.stage_growth == [4, 8]
    assert config.groups == [2, 2]


def test_json_train_config_with_overrides(tmp_path):
    """Test that command-line overrides win over the file, and unset overrides are ignored."""
    path = tmp_path / "train.json"
    path.write_text('{"epochs": 5, "lr": 0.01}')
    config = load_config(TrainConfig, path, {"epochs": 2, "lr": None})
    assert config.epochs == 2
    assert config.lr == 0.01


def test_invalid_values(tmp_path):
    """Test that validation errors name the offending field."""
    path = tmp_path / "train.toml"
    path.write_text("epochs = 0\n")
    with pytest.raises(ConfigurationError, match="epochs"):
        load_config(TrainConfig, path)
    with pytest.raises(ConfigurationError, match="patch_size"):
        validate_config(ModelConfig, {"stage_blocks": [1], "patch_size": 4})


def test_unreadable_files(tmp_path):
    """Test that missing files, syntax errors and unknown formats are configuration errors."""
    with pytest.raises(ConfigurationError):
        read_config_file(tmp_path / "missing.toml")
    broken = tmp_path / "broken.toml"
    broken.write_text("epochs = [\n")
    with pytest.raises(ConfigurationError, match="TOML"):
        read_config_file(broken)
    listed = tmp_path / "list.json"
    listed.write_text("[1, 2]")
    with pytest.raises(ConfigurationError):
        read_config_file(listed)
    other = tmp_path / "config.yaml"
    other.write_text("epochs: 1\n")
    with pytest.raises(ConfigurationError, match="unsupported"):
        read_config_file(other)
