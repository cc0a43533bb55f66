import os

import pytest

from lpnum.common.config import (DATA_DIR_ENV, ExperimentConfig, TrainConfig, load_config_file,
                                 resolve_experiment_config, write_config_file)
from lpnum.common.errors import InvalidScheme
from lpnum.common.qformats import RoundingMode


class TestExperimentConfig:

    @staticmethod
    def test_defaults():
        config = ExperimentConfig()
        assert config.scheme == "float12"
        assert config.rounding == RoundingMode.STOCHASTIC
        assert config.widths == [32, 32, 64]
        assert config.train.epochs == 40
        assert config.name

    @staticmethod
    def test_overrides_from_string():
        config = ExperimentConfig(scheme="fixed12", overrides="weights=fixed[0,14]")
        assert config.overrides == {"weights": "fixed[0,14]"}
        assert str(config.scheme_config().spec("weights")) == "fixed[0,14]"

    @staticmethod
    @pytest.mark.parametrize("kwargs", [{"scheme": "fixed13"}, {"rounding": "up"}])
    def test_invalid(kwargs):
        with pytest.raises(InvalidScheme):
            ExperimentConfig(**kwargs)

    @staticmethod
    def test_unknown_keys():
        with pytest.raises(InvalidScheme) as e:
            ExperimentConfig.from_dict({"scheme": "fixed12", "colour": "blue"})
        assert "colour" in str(e.value)

    @staticmethod
    def test_round_trip():
        config = ExperimentConfig(scheme="ctx-fixed12", name="calm-heron", seed=4,
                                  train=TrainConfig(epochs=3, batch_size=10))
        restored = ExperimentConfig.from_dict(config.as_dict())
        assert restored.as_dict() == config.as_dict()

    @staticmethod
    def test_with_seed():
        seeded = ExperimentConfig(name="calm-heron").with_seed(3)
        assert seeded.seed == 3
        assert seeded.name == "calm-heron-s3"
        assert seeded.run_dir == os.path.join("runs", "calm-heron-s3")

    @staticmethod
    def test_data_dir_from_environment(monkeypatch):
        monkeypatch.setenv(DATA_DIR_ENV, "/data/cifar")
        assert ExperimentConfig().data_dir == "/data/cifar"
        assert ExperimentConfig(data_dir="/elsewhere").data_dir == "/elsewhere"


class TestConfigFiles:

    @staticmethod
    def test_write_and_load(tmp_path):
        path = os.path.join(str(tmp_path), "config.yaml")
        config = ExperimentConfig(scheme="pot", name="quiet-lynx", train=TrainConfig(pot_hyperparameters=True))
        write_config_file(config, path)
        loaded = load_config_file(path)
        assert loaded["scheme"] == "pot"
        assert loaded["pot_hyperparameters"] is True
        assert ExperimentConfig.from_dict(loaded).as_dict() == config.as_dict()

    @staticmethod
    def test_empty_file(tmp_path):
        path = os.path.join(str(tmp_path), "empty.yaml")
        open(path, "w").close()
        assert load_config_file(path) == {}

    @staticmethod
    def test_not_a_mapping(tmp_path):
        path = os.path.join(str(tmp_path), "list.yaml")
        with open(path, "w") as f:
            f.write("- 1\n- 2\n")
        with pytest.raises(InvalidScheme):
            load_config_file(path)

    @staticmethod
    def test_flags_win_over_file():
        config = resolve_experiment_config({"scheme": "fixed12", "epochs": 5, "seed": 1},
                                           {"scheme": "pot", "epochs": None, "seed": 2})
        assert config.scheme == "pot"
        assert config.train.epochs == 5
        assert config.seed == 2
