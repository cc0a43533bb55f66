import logging
import os
from concurrent.futures import ProcessPoolExecutor
from typing import List, Tuple

from lpnum.common.config import ExperimentConfig
from lpnum.common.data import (Dataset, SyntheticSpec, channel_means, load_cifar10, subset, subtract_channel_means,
                               synthesize)
from lpnum.common.errors import DatasetError
from lpnum.common.models import RunSummary, epochs_to_threshold
from lpnum.common.network import NetworkState, build_topology
from lpnum.common.recorder import Recorder
from lpnum.common.trainer import Trainer

logger = logging.getLogger("rich")


class Runner:
    """
    Runs one experiment end to end: data, network, training and every artifact of the run
    directory.
    """

    def __init__(self, config: ExperimentConfig):
        self.config = config

    def datasets(self) -> Tuple[Dataset, Dataset]:
        cfg = self.config
        if cfg.synthetic:
            spec = SyntheticSpec(classes=cfg.classes, samples_per_class=cfg.samples_per_class,
                                 image_size=cfg.image_size, separation=cfg.separation, seed=cfg.data_seed)
            train_set, test_set = synthesize(spec, "train"), synthesize(spec, "test")
        else:
            if not cfg.data_dir:
                raise DatasetError("No CIFAR-10 directory given; pass --data-dir or set LPNUM_DATA_DIR")
            train_set, test_set = load_cifar10(cfg.data_dir, "train"), load_cifar10(cfg.data_dir, "test")
        if cfg.subset:
            train_set = subset(train_set, cfg.subset, cfg.data_seed)
        if cfg.test_subset:
            test_set = subset(test_set, cfg.test_subset, cfg.data_seed)
        if cfg.mean_subtraction:
            means = channel_means(train_set)
            train_set, test_set = subtract_channel_means(train_set, means), subtract_channel_means(test_set, means)
        return train_set, test_set

    def state(self, train_set: Dataset) -> NetworkState:
        cfg = self.config
        scheme = cfg.scheme_config()
        if cfg.resume:
            state = NetworkState.load_checkpoint(cfg.resume, scheme, cfg.rounding)
            state.kernel = cfg.kernel
            state.debug = cfg.debug
            return state
        topology = build_topology(train_set.image_shape, train_set.classes, cfg.widths, cfg.fc_width)
        return NetworkState(topology, scheme, cfg.rounding, seed=cfg.seed, kernel=cfg.kernel, debug=cfg.debug)

    def run(self) -> RunSummary:
        cfg = self.config
        recorder = Recorder(cfg.run_dir, cfg.name, append=bool(cfg.resume))
        recorder.attach_log()
        try:
            recorder.write_config(cfg)
            logger.info("Starting %s (%s, %s rounding, seed %d)", cfg.name, cfg.scheme, cfg.rounding.value, cfg.seed)
            train_set, test_set = self.datasets()
            state = self.state(train_set)
            trainer = Trainer(state, train_set, test_set, cfg.train, recorder, histograms=cfg.histograms,
                              checkpoint_dir=os.path.join(cfg.run_dir, "checkpoints"))
            metrics = trainer.run()
            summary = RunSummary(name=cfg.name, scheme=cfg.scheme, rounding=cfg.rounding.value, seed=cfg.seed,
                                 final_accuracy=metrics[-1].test_accuracy if metrics else float("nan"),
                                 epochs_to_70=epochs_to_threshold(metrics))
            recorder.write_summary(summary)
            logger.info("Finished %s: final accuracy %.2f%%", cfg.name, summary.final_accuracy)
            return summary
        finally:
            recorder.detach_log()


def run_experiment(config: ExperimentConfig) -> RunSummary:
    return Runner(config).run()


def run_sweep(config: ExperimentConfig, seeds: List[int], jobs: int = 1) -> List[RunSummary]:
    """
    One run directory per seed; with `jobs` > 1 the runs execute in separate processes.
    """
    configs = [config.with_seed(seed) for seed in seeds]
    if jobs <= 1 or len(configs) == 1:
        return [run_experiment(c) for c in configs]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(run_experiment, configs))
