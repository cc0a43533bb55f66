import os

import pytest

from lpnum.common.config import ExperimentConfig, TrainConfig
from lpnum.common.errors import DatasetError
from lpnum.common.reader import Reader
from lpnum.common.recorder import CONFIG_FILE, LOG_FILE, METRICS_FILE, SUMMARY_FILE
from lpnum.common.runner import Runner, run_experiment, run_sweep


def small_config(output_dir: str, **kwargs) -> ExperimentConfig:
    options = dict(scheme="fixed12", synthetic=True, classes=3, samples_per_class=6, image_size=16,
                   separation=2.0, widths=[2, 3, 4], fc_width=6, output_dir=output_dir, name="tidy-newt",
                   train=TrainConfig(learning_rate=0.01, batch_size=6, epochs=1))
    options.update(kwargs)
    return ExperimentConfig(**options)


class TestRunner:

    @staticmethod
    def test_run_writes_every_artifact(tmp_path):
        config = small_config(str(tmp_path))
        summary = run_experiment(config)
        assert summary.name == "tidy-newt"
        assert summary.scheme == "fixed12"
        for name in (CONFIG_FILE, METRICS_FILE, SUMMARY_FILE, LOG_FILE):
            assert os.path.isfile(os.path.join(config.run_dir, name))
        assert os.path.isfile(os.path.join(config.run_dir, "checkpoints", "latest", "checkpoint.json"))
        record = Reader().load_run(config.run_dir)
        assert record.summary.final_accuracy == summary.final_accuracy

    @staticmethod
    def test_same_seed_same_metrics(tmp_path):
        a = small_config(os.path.join(str(tmp_path), "a"))
        b = small_config(os.path.join(str(tmp_path), "b"))
        run_experiment(a)
        run_experiment(b)
        with open(os.path.join(a.run_dir, METRICS_FILE)) as fa, open(os.path.join(b.run_dir, METRICS_FILE)) as fb:
            assert fa.read() == fb.read()

    @staticmethod
    def test_resume(tmp_path):
        first = small_config(str(tmp_path))
        run_experiment(first)
        resumed = small_config(str(tmp_path), resume=os.path.join(first.run_dir, "checkpoints", "latest"),
                               train=TrainConfig(learning_rate=0.01, batch_size=6, epochs=2))
        run_experiment(resumed)
        assert [m.epoch for m in Reader().load_run(first.run_dir).metrics] == [1, 2]

    @staticmethod
    def test_subsets_and_mean_subtraction(tmp_path):
        train_set, test_set = Runner(small_config(str(tmp_path), subset=9, test_subset=6,
                                                  mean_subtraction=True)).datasets()
        assert len(train_set) == 9
        assert len(test_set) == 6
        assert train_set.centered and test_set.centered

    @staticmethod
    def test_missing_data_dir(tmp_path, monkeypatch):
        monkeypatch.delenv("LPNUM_DATA_DIR", raising=False)
        with pytest.raises(DatasetError):
            Runner(small_config(str(tmp_path), synthetic=False)).datasets()

    @staticmethod
    def test_sweep(tmp_path):
        summaries = run_sweep(small_config(str(tmp_path)), [0, 1])
        assert [s.name for s in summaries] == ["tidy-newt-s0", "tidy-newt-s1"]
        assert [s.seed for s in summaries] == [0, 1]
        assert sorted(os.listdir(str(tmp_path))) == ["tidy-newt-s0", "tidy-newt-s1"]
