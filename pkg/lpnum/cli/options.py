from enum import Enum
from typing import Optional

import typer

from lpnum.common.qformats import RoundingMode


class Scheme(str, Enum):
    FP32_BASELINE = "fp32-baseline"
    FIXED12 = "fixed12"
    SCALED_FIXED12 = "scaled-fixed12"
    FLOAT12 = "float12"
    CTX_FIXED12 = "ctx-fixed12"
    CTX_FLOAT12 = "ctx-float12"
    POT = "pot"


class KernelMode(str, Enum):
    BLAS = "blas"
    EXACT = "exact"
    EXACT_MULTIPLY = "exact-multiply"


class OutputFormat(str, Enum):
    JSON = "json"
    TABLE = "table"
    CSV = "csv"


class LogLevel(str, Enum):
    INFO = "INFO"
    DEBUG = "DEBUG"


def _scheme() -> Optional[Scheme]:
    return typer.Option(
        default=None,
        help="Numeric scheme, i.e. the format of every parameter class [default: float12]"
    )


def _rounding() -> Optional[RoundingMode]:
    return typer.Option(
        default=None,
        help="Rounding mode applied at every quantization point [default: stochastic]"
    )


def _formats() -> Optional[str]:
    return typer.Option(
        default=None,
        help="Per-class format overrides, e.g. 'weights=fixed[0,14],outputs=fixed[6,6]'"
    )


def _seed() -> Optional[int]:
    return typer.Option(
        default=None,
        help="Seed for initialization, shuffling, dropout and stochastic rounding [default: 0]"
    )


def _epochs() -> Optional[int]:
    return typer.Option(
        default=None,
        min=0,
        help="Training epochs [default: 40]"
    )


def _batch_size() -> Optional[int]:
    return typer.Option(
        default=None,
        min=1,
        help="Images per SGD step [default: 100]"
    )


def _pot_hyperparameters() -> Optional[bool]:
    return typer.Option(
        None, "--pot-hyperparameters/--no-pot-hyperparameters",
        help="Round learning rate, momentum and weight decay to powers of two so the update multiplies "
             "become shifts [default: off]"
    )


def _output(default: OutputFormat = OutputFormat.TABLE) -> OutputFormat:
    return typer.Option(
        default=default,
        help="Output format"
    )


def _log_level() -> LogLevel:
    return typer.Option(
        default=LogLevel.INFO,
        help="Log level; DEBUG also reports context scale changes and turns on --debug unless --no-debug is given"
    )
