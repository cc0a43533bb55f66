from typing import Dict, List, Sequence, Union

import numpy as np

from lpnum import ExperimentConfig, Reader, Runner, SchemeConfig, TrainConfig, build_topology, parse_format
from lpnum.common.conformance import run_conformance
from lpnum.common.costmodel import CostReport, cost_report, load_cost_table
from lpnum.common.models import ConformanceResult, RunSummary
from lpnum.common.qformats import RoundingMode, quantize_array
from lpnum.common.util import RngStreams


def train_scheme(scheme: str = "float12", rounding: str = "stochastic", overrides: Dict[str, str] = None,
                 data_dir: str = None, synthetic: bool = False, seed: int = 0, epochs: int = 40,
                 batch_size: int = 100, learning_rate: float = 0.001, momentum: float = 0.9,
                 weight_decay: float = 0.004, pot_hyperparameters: bool = False, subset: int = 0,
                 output_dir: str = "runs", name: str = None, kernel: str = "exact",
                 **kwargs) -> RunSummary:
    """
    Trains the CNN under a numeric scheme and returns the run's summary

    :param scheme:              One of fp32-baseline, fixed12, scaled-fixed12, float12, ctx-fixed12, ctx-float12, pot
    :param rounding:            nearest, stochastic or truncate
    :param overrides:           Per-class format literals, e.g. {"weights": "fixed[0,14]"}
    :param data_dir:            The CIFAR-10 binary batch directory; falls back to $LPNUM_DATA_DIR
    :param synthetic:           Whether to train on generated class-prototype images instead
    :param seed:                Seed for initialization, shuffling, dropout and stochastic rounding
    :param epochs:              Training epochs
    :param batch_size:          Images per SGD step
    :param learning_rate:       SGD learning rate
    :param momentum:            SGD momentum
    :param weight_decay:        L2 weight decay
    :param pot_hyperparameters: Whether to round the three hyperparameters to powers of two
    :param subset:              Train on a class-stratified subset of this many images (0: all)
    :param output_dir:          The parent directory of the run directory
    :param name:                The run's name; auto-generated if not provided
    :param kernel:              exact (bit-reproducible), exact-multiply or blas (fast, not reproducible)
    :param kwargs:              Any other ExperimentConfig option
    :return:                    RunSummary instance
    """
    train = TrainConfig(learning_rate=learning_rate, momentum=momentum, weight_decay=weight_decay,
                        batch_size=batch_size, epochs=epochs, pot_hyperparameters=pot_hyperparameters)
    config = ExperimentConfig(scheme=scheme, rounding=rounding, overrides=overrides, data_dir=data_dir,
                              synthetic=synthetic, seed=seed, subset=subset, output_dir=output_dir, name=name,
                              kernel=kernel, train=train, **kwargs)
    return Runner(config).run()


def estimate_costs(schemes: Sequence[str] = None, epochs: int = 40, dataset_size: int = 50000,
                   batch_size: int = 100, cost_table: str = None, pot_hyperparameters: bool = False,
                   widths: Sequence[int] = (32, 32, 64), fc_width: int = 1000) -> List[CostReport]:
    """
    Estimates the training time and memory footprint of each scheme

    :param schemes:             The schemes to estimate; all seven if not provided
    :param epochs:              Training epochs
    :param dataset_size:        Training images per epoch
    :param batch_size:          Images per SGD step
    :param cost_table:          A JSON cost table; the bundled calibration if not provided
    :param pot_hyperparameters: Whether the update multiplies are counted as shifts
    :param widths:              Conv widths of the topology
    :param fc_width:            Hidden FC width of the topology
    :return:                    One CostReport per scheme
    """
    from lpnum.common.network import SCHEMES

    table = load_cost_table(cost_table)
    topology = build_topology(widths=widths, fc_width=fc_width)
    return [
        cost_report(topology, SchemeConfig.from_name(name), table, dataset_size=dataset_size, epochs=epochs,
                    batch_size=batch_size, pot_hyperparameters=pot_hyperparameters)
        for name in (schemes or SCHEMES)
    ]


def check_conformance(suites: Sequence[str] = None, quick: bool = False, seed: int = 0) -> List[ConformanceResult]:
    """
    Runs the conformance suites and raises ConformanceFailure on the first failing one

    :param suites:  codepoints, rounding, shift, gradients; all if not provided
    :param quick:   Fewer points and draws
    :param seed:    Seed of every random draw
    :return:        ConformanceResult per suite
    """
    return run_conformance(suites, quick=quick, seed=seed, raise_on_failure=True)


def summarize_runs(paths: List[str]) -> List[Dict]:
    """
    Aggregates finished runs into mean and standard deviation per scheme and rounding mode

    :param paths:   Run directories, or directories containing runs
    :return:        One row per (scheme, rounding) group
    """
    reader = Reader()
    return reader.aggregate(reader.load_all(paths))


def quantize(values: Union[np.ndarray, Sequence[float]], fmt: str, rounding: str = "nearest",
             seed: int = 0) -> np.ndarray:
    """
    Rounds values onto a format literal's grid, saturating out-of-range values

    :param values:      The values to quantize
    :param fmt:         A format literal such as "fixed[6,6]" or "float[5,6]*2^-3"
    :param rounding:    nearest, stochastic or truncate
    :param seed:        Seed of the stochastic rounding stream
    :return:            The quantized values
    """
    spec = parse_format(fmt)
    mode = RoundingMode(rounding)
    rng = RngStreams(seed).stream("quantize") if mode == RoundingMode.STOCHASTIC else None
    return quantize_array(np.asarray(values, dtype=np.float64), spec.base, spec.scale, mode, rng)
