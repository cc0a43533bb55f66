import logging
import platform
from sys import exit
from typing import List, Optional

import numpy as np
import typer
from rich.console import Console
from rich.logging import RichHandler
from rich.markdown import Markdown

from lpnum import LPNUM_VERSION
from lpnum.cli.options import (KernelMode, LogLevel, OutputFormat, Scheme, _batch_size, _epochs, _formats,
                               _log_level, _output, _pot_hyperparameters, _rounding, _scheme, _seed)
from lpnum.common.config import load_config_file, resolve_experiment_config
from lpnum.common.conformance import SUITES, run_conformance
from lpnum.common.costmodel import cost_report, load_cost_table
from lpnum.common.errors import LpnumError
from lpnum.common.network import SchemeConfig, build_topology
from lpnum.common.qformats import RoundingMode, enumerate_codepoints, parse_format
from lpnum.common.reader import Reader, aggregate_as_markdown_table, rows_as_csv
from lpnum.common.runner import run_experiment, run_sweep
from lpnum.common.util import parse_2d_separated_string, parse_int_list

console = Console()

cli = typer.Typer(no_args_is_help=True)

log_handler = RichHandler(show_path=False)

logging.basicConfig(
    level=logging.INFO, format="%(message)s", datefmt="%Y-%m-%dT%H:%M:%S.%f %z", handlers=[log_handler]
)

logger = logging.getLogger("rich")

DEFAULT_DUMP_FORMATS = ["fixed[0,12]", "fixed[6,6]", "float[5,6]", "float[4,7]", "float[6,0]"]


def _set_log_level(log_level: LogLevel) -> None:
    logging.getLogger().setLevel(log_level.value)
    logger.setLevel(log_level.value)


@cli.command(help="Print lpnum's version")
def version():
    console.print_json(data={
        "lpnum_version": LPNUM_VERSION,
        "numpy_version": np.__version__,
        "python_version": platform.python_version(),
    })


@cli.command(name="run",
             help="Train the CNN under a numeric scheme and write metrics, checkpoints and histograms")
def train(
        config: Optional[str] = typer.Option(
            default=None,
            help="YAML file whose keys mirror these flags; flags given explicitly take precedence"
        ),
        scheme: Optional[Scheme] = _scheme(),
        rounding: Optional[RoundingMode] = _rounding(),
        formats: Optional[str] = _formats(),
        data_dir: Optional[str] = typer.Option(
            default=None,
            help="Directory holding the CIFAR-10 binary batches [default: $LPNUM_DATA_DIR]"
        ),
        synthetic: Optional[bool] = typer.Option(
            None, "--synthetic/--no-synthetic",
            help="Train on a generated dataset of Gaussian class prototypes instead of CIFAR-10"
        ),
        classes: Optional[int] = typer.Option(default=None, min=2, help="Synthetic classes [default: 10]"),
        samples_per_class: Optional[int] = typer.Option(
            default=None, min=1, help="Synthetic samples per class and split [default: 100]"
        ),
        image_size: Optional[int] = typer.Option(default=None, min=8, help="Synthetic image size [default: 32]"),
        separation: Optional[float] = typer.Option(
            default=None, min=0.0, help="Distance between synthetic class prototypes [default: 1.0]"
        ),
        subset: Optional[int] = typer.Option(
            default=None, min=0, help="Train on a class-stratified subset of this many images (0: all)"
        ),
        test_subset: Optional[int] = typer.Option(
            default=None, min=0, help="Evaluate on a class-stratified subset of this many images (0: all)"
        ),
        mean_subtraction: Optional[bool] = typer.Option(
            None, "--mean-subtraction/--no-mean-subtraction",
            help="Subtract the training set's per-channel means [default: off]"
        ),
        seed: Optional[int] = _seed(),
        seeds: Optional[str] = typer.Option(
            default=None,
            help="Comma-separated seeds; runs one experiment per seed (overrides --seed)"
        ),
        jobs: int = typer.Option(default=1, min=1, help="Worker processes for multi-seed sweeps"),
        data_seed: Optional[int] = typer.Option(
            default=None, help="Seed of the subset selection and synthetic data [default: 0]"
        ),
        output_dir: Optional[str] = typer.Option(default=None, help="Parent directory of run directories"),
        name: Optional[str] = typer.Option(
            default=None, help="The run's name; auto-generated if not provided"
        ),
        kernel: Optional[KernelMode] = typer.Option(
            default=None,
            help="'exact' (sequential multiply kernels, shift kernels for power-of-two operands), "
                 "'exact-multiply', or 'blas' (fast, but its summation order depends on the BLAS build "
                 "and is not bit-reproducible) [default: exact]"
        ),
        debug: Optional[bool] = typer.Option(
            None, "--debug/--no-debug",
            help="Assert that every stored tensor conforms to its format after each pass "
                 "[default: on with --log-level DEBUG]"
        ),
        histograms: Optional[bool] = typer.Option(
            None, "--histograms/--no-histograms",
            help="Write per-layer log2-magnitude histograms every epoch"
        ),
        widths: Optional[str] = typer.Option(
            default=None, help="Comma-separated conv widths [default: 32,32,64]"
        ),
        fc_width: Optional[int] = typer.Option(default=None, min=1, help="Hidden FC width [default: 1000]"),
        resume: Optional[str] = typer.Option(
            default=None,
            help="Checkpoint directory to resume from; a different --scheme re-quantizes the checkpoint"
        ),
        learning_rate: Optional[float] = typer.Option(default=None, help="Learning rate [default: 0.001]"),
        momentum: Optional[float] = typer.Option(default=None, help="Momentum [default: 0.9]"),
        weight_decay: Optional[float] = typer.Option(default=None, help="Weight decay [default: 0.004]"),
        batch_size: Optional[int] = _batch_size(),
        epochs: Optional[int] = _epochs(),
        pot_hyperparameters: Optional[bool] = _pot_hyperparameters(),
        checkpoint_every: Optional[int] = typer.Option(
            default=None, min=0, help="Write a checkpoint every N epochs (0: only at the end)"
        ),
        log_level: LogLevel = _log_level(),
):
    _set_log_level(log_level)
    if debug is None and log_level == LogLevel.DEBUG:
        debug = True
    flags = {
        "scheme": scheme.value if scheme else None,
        "rounding": rounding.value if rounding else None,
        "overrides": formats,
        "data_dir": data_dir,
        "synthetic": synthetic,
        "classes": classes,
        "samples_per_class": samples_per_class,
        "image_size": image_size,
        "separation": separation,
        "subset": subset,
        "test_subset": test_subset,
        "mean_subtraction": mean_subtraction,
        "seed": seed,
        "data_seed": data_seed,
        "output_dir": output_dir,
        "name": name,
        "kernel": kernel.value if kernel else None,
        "debug": debug,
        "histograms": histograms,
        "widths": parse_int_list(widths) or None,
        "fc_width": fc_width,
        "resume": resume,
        "learning_rate": learning_rate,
        "momentum": momentum,
        "weight_decay": weight_decay,
        "batch_size": batch_size,
        "epochs": epochs,
        "pot_hyperparameters": pot_hyperparameters,
        "checkpoint_every": checkpoint_every,
    }
    try:
        experiment = resolve_experiment_config(load_config_file(config) if config else None, flags)
        experiment.scheme_config()
        if seeds:
            summaries = run_sweep(experiment, parse_int_list(seeds), jobs=jobs)
        else:
            summaries = [run_experiment(experiment)]
        if len(summaries) > 1:
            for s in summaries:
                logger.info("%s: %.2f%% (epochs to 70%%: %s)", s.name, s.final_accuracy,
                            "-" if s.epochs_to_70 is None else s.epochs_to_70)
    except LpnumError as e:
        logger.error(str(e))
        exit(1)
    except Exception:
        logger.exception("Could not complete the run - an error has occurred")
        exit(1)


def _cost_rows(reports, output: OutputFormat) -> None:
    if output == OutputFormat.JSON:
        console.print_json(data=[{**r.summary(), "layers": r.rows()} for r in reports])
    elif output == OutputFormat.CSV:
        typer.echo(rows_as_csv([row for r in reports for row in r.rows()]), nl=False)
    else:
        lines = ["| Scheme | Hours | Memory (MB) | Reference (MB) | Deviation |", "|---|---|---|---|---|"]
        for r in reports:
            s = r.summary()
            reference = "-" if s["reference_megabytes"] is None else f"{s['reference_megabytes']:.3f}"
            error = "-" if s["memory_error"] is None else f"{s['memory_error']:+.1%}"
            lines.append(f"| {s['scheme']} | {s['hours']:.4f} | {s['megabytes']:.2f} | {reference} | {error} |")
        console.print(Markdown("\n".join(lines)))


@cli.command(help="Estimate training time and memory of numeric schemes from operation counts")
def cost(
        scheme: Optional[List[Scheme]] = typer.Option(
            default=None,
            help="The scheme(s) to estimate; all schemes if not provided"
        ),
        formats: Optional[str] = _formats(),
        epochs: int = typer.Option(default=40, min=1, help="Training epochs"),
        dataset_size: int = typer.Option(default=50000, min=1, help="Training images per epoch"),
        batch_size: int = typer.Option(default=100, min=1, help="Images per SGD step"),
        cost_table: Optional[str] = typer.Option(
            default=None,
            help="JSON file of per-operation costs; the bundled calibration if not provided"
        ),
        pot_hyperparameters: bool = typer.Option(
            False, "--pot-hyperparameters/--no-pot-hyperparameters",
            help="Count the update multiplies as shifts"
        ),
        widths: Optional[str] = typer.Option(default=None, help="Comma-separated conv widths [default: 32,32,64]"),
        fc_width: int = typer.Option(default=1000, min=1, help="Hidden FC width"),
        output: OutputFormat = _output(OutputFormat.CSV),
):
    try:
        table = load_cost_table(cost_table)
        topology = build_topology(widths=parse_int_list(widths) or (32, 32, 64), fc_width=fc_width)
        names = [s.value for s in scheme] if scheme else [s.value for s in Scheme]
        overrides = parse_2d_separated_string(formats)
        reports = [
            cost_report(topology, SchemeConfig.from_name(name, overrides), table, dataset_size=dataset_size,
                        epochs=epochs, batch_size=batch_size, pot_hyperparameters=pot_hyperparameters)
            for name in names
        ]
        _cost_rows(reports, output)
    except LpnumError as e:
        logger.error(str(e))
        exit(1)
    except Exception:
        logger.exception("Could not estimate costs - an error has occurred")
        exit(1)


@cli.command(help="Run the numeric conformance suites")
def conformance(
        suite: Optional[List[str]] = typer.Option(
            default=None,
            help=f"The suite(s) to run: {', '.join(SUITES)}; all suites if not provided"
        ),
        quick: bool = typer.Option(False, "--quick", help="Fewer points and draws"),
        seed: int = typer.Option(default=0, help="Seed of every random draw"),
        output: OutputFormat = _output(),
):
    try:
        results = run_conformance(suite or None, quick=quick, seed=seed)
    except LpnumError as e:
        logger.error(str(e))
        exit(1)
    except ValueError as e:
        logger.error(str(e))
        exit(1)
    except Exception:
        logger.exception("Could not run the conformance suites - an error has occurred")
        exit(1)
    if output == OutputFormat.JSON:
        console.print_json(data=[r.as_dict() for r in results])
    elif output == OutputFormat.CSV:
        typer.echo(rows_as_csv([r.as_dict() for r in results]), nl=False)
    else:
        lines = ["| Suite | Result | Seconds | Seed | Detail |", "|---|---|---|---|---|"]
        lines.extend(r.as_markdown_table_row() for r in results)
        console.print(Markdown("\n".join(lines)))
    if not all(r.passed for r in results):
        exit(1)


@cli.command(help="Aggregate finished runs by scheme and rounding mode")
def summarize(
        paths: List[str] = typer.Argument(..., help="Run directories, or directories containing runs"),
        output: OutputFormat = _output(),
):
    try:
        reader = Reader()
        rows = reader.aggregate(reader.load_all(paths))
    except LpnumError as e:
        logger.error(str(e))
        exit(1)
    except Exception:
        logger.exception("Could not summarize the runs - an error has occurred")
        exit(1)
    if output == OutputFormat.JSON:
        console.print_json(data=rows)
    elif output == OutputFormat.CSV:
        typer.echo(rows_as_csv(rows), nl=False)
    else:
        console.print(Markdown(aggregate_as_markdown_table(rows)))


@cli.command(name="dump-formats", help="List the codepoints of numeric formats")
def dump_formats(
        fmt: Optional[List[str]] = typer.Option(
            None, "--format",
            help=f"The format(s) to dump; {', '.join(DEFAULT_DUMP_FORMATS)} if not provided"
        ),
        output: OutputFormat = _output(),
):
    try:
        specs = [parse_format(text) for text in (fmt or DEFAULT_DUMP_FORMATS)]
        dumps = {str(spec): enumerate_codepoints(spec.base) for spec in specs}
    except LpnumError as e:
        logger.error(str(e))
        exit(1)
    except Exception:
        logger.exception("Could not enumerate the formats - an error has occurred")
        exit(1)
    if output == OutputFormat.JSON:
        console.print_json(data={name: values.tolist() for name, values in dumps.items()})
    elif output == OutputFormat.CSV:
        typer.echo(rows_as_csv([
            {"format": name, "index": i, "value": repr(float(v))}
            for name, values in dumps.items() for i, v in enumerate(values)
        ]), nl=False)
    else:
        lines = ["| Format | Codepoints | Min | Max | Smallest positive |", "|---|---|---|---|---|"]
        for name, values in dumps.items():
            positive = values[values > 0]
            lines.append(f"| {name} | {len(values)} | {values[0]:g} | {values[-1]:g} | "
                         f"{positive[0] if len(positive) else 0:g} |")
        console.print(Markdown("\n".join(lines)))


def run():
    cli()


if __name__ == "__main__":
    run()
