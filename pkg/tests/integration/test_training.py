import json
import os

import pytest
from typer.testing import CliRunner

from lpnum.cmd import cli
from lpnum.common.config import ExperimentConfig, TrainConfig
from lpnum.common.conformance import run_conformance
from lpnum.common.network import SCHEMES
from lpnum.common.reader import Reader
from lpnum.common.recorder import METRICS_FILE
from lpnum.common.runner import run_experiment, run_sweep


def synthetic_config(output_dir: str, name: str, **kwargs) -> ExperimentConfig:
    options = dict(synthetic=True, classes=4, samples_per_class=20, image_size=16, separation=2.0,
                   widths=[4, 4, 8], fc_width=32, output_dir=output_dir, name=name,
                   train=TrainConfig(learning_rate=0.01, batch_size=10, epochs=2))
    options.update(kwargs)
    return ExperimentConfig(**options)


def read_metrics(run_dir: str):
    with open(os.path.join(run_dir, METRICS_FILE)) as f:
        return [json.loads(line) for line in f]


@pytest.mark.slow
class TestTraining:

    @staticmethod
    @pytest.mark.parametrize("scheme", list(SCHEMES))
    def test_every_scheme_trains_conformantly(tmp_path, scheme: str):
        config = synthetic_config(str(tmp_path), f"int-{scheme}", scheme=scheme, debug=True, histograms=True)
        summary = run_experiment(config)
        metrics = read_metrics(config.run_dir)
        assert [m["epoch"] for m in metrics] == [1, 2]
        assert 0.0 <= summary.final_accuracy <= 100.0
        if config.scheme_config().uses_contexts:
            assert metrics[-1]["contexts"]
            assert metrics[-1]["ops"]["scale_adjust"] > 0

    @staticmethod
    def test_pot_kernels_train_identically(tmp_path):
        losses = []
        for kernel in ("exact", "exact-multiply"):
            config = synthetic_config(str(tmp_path), f"pot-{kernel}", scheme="pot", kernel=kernel,
                                      samples_per_class=5, train=TrainConfig(learning_rate=0.01, batch_size=10,
                                                                             epochs=1))
            run_experiment(config)
            losses.append([(m["train_loss"], m["test_accuracy"]) for m in read_metrics(config.run_dir)])
        assert losses[0] == losses[1]

    @staticmethod
    def test_resume_under_another_scheme(tmp_path):
        first = synthetic_config(str(tmp_path), "switch", scheme="fp32-baseline",
                                 train=TrainConfig(learning_rate=0.01, batch_size=10, epochs=1))
        run_experiment(first)
        resumed = synthetic_config(str(tmp_path), "switch", scheme="fixed12", debug=True,
                                   resume=os.path.join(first.run_dir, "checkpoints", "latest"))
        run_experiment(resumed)
        record = Reader().load_run(first.run_dir)
        assert [m.epoch for m in record.metrics] == [1, 2]
        assert record.summary.scheme == "fixed12"

    @staticmethod
    def test_parallel_sweep_matches_sequential(tmp_path):
        parallel = run_sweep(synthetic_config(os.path.join(str(tmp_path), "p"), "sweep"), [0, 1], jobs=2)
        sequential = run_sweep(synthetic_config(os.path.join(str(tmp_path), "s"), "sweep"), [0, 1], jobs=1)
        assert [s.as_dict() for s in parallel] == [s.as_dict() for s in sequential]

    @staticmethod
    def test_conformance_suites_pass():
        results = run_conformance(quick=True, seed=0)
        assert [r.name for r in results] == ["codepoints", "rounding", "shift", "gradients"]
        assert all(r.passed for r in results), [r.detail for r in results if not r.passed]

    @staticmethod
    def test_cli_run_then_summarize(tmp_path):
        root = str(tmp_path)
        result = CliRunner().invoke(cli, [
            "run", "--synthetic", "--classes", "3", "--samples-per-class", "6", "--image-size", "16",
            "--widths", "2,3,4", "--fc-width", "6", "--epochs", "1", "--batch-size", "6",
            "--learning-rate", "0.01", "--seeds", "0,1", "--output-dir", root, "--name", "cli",
        ])
        assert result.exit_code == 0
        result = CliRunner().invoke(cli, ["summarize", root, "--output", "json"])
        assert result.exit_code == 0
        rows = json.loads(result.stdout)
        assert rows[0]["runs"] == 2
