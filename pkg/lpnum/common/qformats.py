"""
Low-precision numeric formats emulated over binary64.

Every format defines a finite representable set (a grid). Values are stored as ordinary
binary64 numbers that are constrained to that grid by `quantize`: saturate to the format's
range first, then round to one of the two bracketing grid points.
"""
import logging
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Tuple, Union

import numpy as np

from lpnum.common.errors import DomainError, FormatError, MissingRngError

logger = logging.getLogger("rich")

MAX_WIDTH = 16


class RoundingMode(str, Enum):
    NEAREST = "nearest"
    STOCHASTIC = "stochastic"
    TRUNCATE = "truncate"


class NumericFormat:
    kind: str = "format"
    width: int = 0

    @property
    def max_value(self) -> float:
        raise NotImplementedError

    @property
    def min_value(self) -> float:
        raise NotImplementedError

    @property
    def min_positive(self) -> float:
        raise NotImplementedError

    @property
    def is_wide(self) -> bool:
        return False

    @property
    def is_pot(self) -> bool:
        return False

    def grid(self, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """
        Returns (k, ulp) such that k * ulp is the largest grid point <= x. `x` must already be
        saturated; k is integer-valued and ulp a power of two.
        """
        raise NotImplementedError


@dataclass(frozen=True)
class FixedFormat(NumericFormat):
    int_bits: int
    frac_bits: int
    kind: str = field(default="fixed", init=False, repr=False)

    def __post_init__(self):
        if self.int_bits < 0 or self.frac_bits < 0:
            raise FormatError(f"fixed[{self.int_bits},{self.frac_bits}]: bit counts must be non-negative")
        if not 1 <= self.int_bits + self.frac_bits <= MAX_WIDTH:
            raise FormatError(f"fixed[{self.int_bits},{self.frac_bits}]: payload must be 1..{MAX_WIDTH} bits")

    @property
    def width(self) -> int:
        return self.int_bits + self.frac_bits

    @property
    def epsilon(self) -> float:
        return 2.0 ** -self.frac_bits

    @property
    def max_value(self) -> float:
        return 2.0 ** (self.int_bits - 1) - self.epsilon

    @property
    def min_value(self) -> float:
        return -2.0 ** (self.int_bits - 1)

    @property
    def min_positive(self) -> float:
        return self.epsilon

    def grid(self, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        ulp = np.full_like(x, self.epsilon)
        return np.floor(np.ldexp(x, self.frac_bits)), ulp

    def __str__(self) -> str:
        return f"fixed[{self.int_bits},{self.frac_bits}]"


@dataclass(frozen=True)
class FloatFormat(NumericFormat):
    """
    Sign-magnitude minifloat with an implicit leading one, gradual underflow and no
    infinity/NaN codes: the all-ones exponent is an ordinary exponent and overflow saturates.
    """
    exp_bits: int
    man_bits: int
    bias: Optional[int] = None
    kind: str = field(default="float", init=False, repr=False)

    def __post_init__(self):
        if self.exp_bits < 1 or self.man_bits < 0:
            raise FormatError(f"float[{self.exp_bits},{self.man_bits}]: needs E >= 1 and M >= 0")
        if 1 + self.exp_bits + self.man_bits > MAX_WIDTH:
            raise FormatError(f"float[{self.exp_bits},{self.man_bits}]: width exceeds {MAX_WIDTH} bits")
        if self.bias is None:
            object.__setattr__(self, "bias", 2 ** (self.exp_bits - 1) - 1)

    @property
    def default_bias(self) -> bool:
        return self.bias == 2 ** (self.exp_bits - 1) - 1

    @property
    def width(self) -> int:
        return 1 + self.exp_bits + self.man_bits

    @property
    def emin(self) -> int:
        return 1 - self.bias

    @property
    def emax(self) -> int:
        return 2 ** self.exp_bits - 1 - self.bias

    @property
    def max_value(self) -> float:
        return (2.0 - 2.0 ** -self.man_bits) * 2.0 ** self.emax

    @property
    def min_value(self) -> float:
        return -self.max_value

    @property
    def min_positive(self) -> float:
        return 2.0 ** (self.emin - self.man_bits)

    @property
    def is_pot(self) -> bool:
        return self.man_bits == 0

    def grid(self, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        _, ex = np.frexp(np.abs(x))
        exponent = np.maximum(ex - 1, self.emin)
        ulp = np.ldexp(1.0, exponent - self.man_bits)
        return np.floor(x / ulp), ulp

    def __str__(self) -> str:
        if self.default_bias:
            return f"float[{self.exp_bits},{self.man_bits}]"
        return f"float[{self.exp_bits},{self.man_bits},bias={self.bias}]"


@dataclass(frozen=True)
class WideFormat(NumericFormat):
    kind: str = field(default="wide", init=False, repr=False)

    @property
    def width(self) -> int:
        return 64

    @property
    def is_wide(self) -> bool:
        return True

    @property
    def max_value(self) -> float:
        return float(np.finfo(np.float64).max)

    @property
    def min_value(self) -> float:
        return -self.max_value

    @property
    def min_positive(self) -> float:
        return float(np.finfo(np.float64).tiny)

    def __str__(self) -> str:
        return "wide"


WIDE = WideFormat()


@dataclass(frozen=True)
class GlobalScale:
    exponent: int = 0

    @property
    def factor(self) -> float:
        return 2.0 ** self.exponent

    def __str__(self) -> str:
        return f"*2^{self.exponent}" if self.exponent else ""


UNSCALED = GlobalScale()


@dataclass(frozen=True)
class FormatSpec:
    """
    A parsed format literal: a base format, its global scale, and whether the base grid is
    translated by a per-context scale factor (`ctx-fixed[I,F]`, `ctx-float[E,M]`).
    """
    base: NumericFormat
    scale: GlobalScale = UNSCALED
    contextual: bool = False

    @property
    def width(self) -> int:
        return self.base.width

    @property
    def is_wide(self) -> bool:
        return self.base.is_wide

    @property
    def is_pot(self) -> bool:
        return self.base.is_pot and not self.contextual

    def __str__(self) -> str:
        if self.contextual:
            if isinstance(self.base, FloatFormat):
                return f"ctx-float[{self.base.exp_bits},{self.base.man_bits}]"
            return f"ctx-{self.base}"
        return f"{self.base}{self.scale}"


_LITERAL_RE = re.compile(
    r"^(?P<ctx>ctx-)?(?P<kind>fixed|float|pot)\[(?P<a>\d+)(?:,(?P<b>\d+))?(?:,bias=(?P<bias>-?\d+))?\]"
    r"(?:\*2\^(?P<scale>[+-]?\d+))?$"
)


def context_float_base(exp_bits: int, man_bits: int) -> FloatFormat:
    # The relative exponent is an E-bit two's-complement field: code c <-> e_rel = c - 2^(E-1).
    return FloatFormat(exp_bits, man_bits, bias=2 ** (exp_bits - 1))


def parse_format(text: str) -> FormatSpec:
    literal = re.sub(r"\s+", "", str(text)).lower()
    if literal in ("wide", "fp32", "fp64"):
        return FormatSpec(base=WIDE)
    match = _LITERAL_RE.match(literal)
    if not match:
        raise FormatError(f"Could not parse the format literal '{text}'")
    kind, a, b = match.group("kind"), int(match.group("a")), match.group("b")
    contextual = match.group("ctx") is not None
    scale = GlobalScale(int(match.group("scale"))) if match.group("scale") else UNSCALED
    bias = match.group("bias")
    if contextual and (scale.exponent or bias is not None):
        raise FormatError(f"'{text}': context formats take neither a global scale nor an explicit bias")
    if kind == "pot":
        if b is not None:
            raise FormatError(f"'{text}': pot[E] takes a single exponent width")
        if contextual:
            raise FormatError(f"'{text}': there is no context power-of-two format")
        return FormatSpec(base=FloatFormat(a, 0), scale=scale)
    if b is None:
        raise FormatError(f"'{text}': expected two bit counts")
    if kind == "fixed":
        if bias is not None:
            raise FormatError(f"'{text}': fixed-point formats have no exponent bias")
        return FormatSpec(base=FixedFormat(a, int(b)), scale=scale, contextual=contextual)
    if contextual:
        return FormatSpec(base=context_float_base(a, int(b)), contextual=True)
    return FormatSpec(base=FloatFormat(a, int(b), None if bias is None else int(bias)), scale=scale)


def _check_finite(x: np.ndarray) -> None:
    if not np.all(np.isfinite(x)):
        raise DomainError("Cannot quantize non-finite values")


def saturate_array(x: np.ndarray, fmt: NumericFormat, scale: GlobalScale = UNSCALED) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    _check_finite(x)
    if fmt.is_wide:
        return x.copy()
    return np.clip(x, fmt.min_value * scale.factor, fmt.max_value * scale.factor)


def quantize_array(x: np.ndarray, fmt: NumericFormat, scale: GlobalScale = UNSCALED,
                   mode: RoundingMode = RoundingMode.NEAREST,
                   rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """
    Saturates then rounds every element of `x` onto the grid of `fmt` scaled by `scale`.

    Stochastic rounding draws exactly one uniform per element, in row-major order, so equal
    shapes consume equal amounts of the stream whatever the values are.
    """
    mode = RoundingMode(mode)
    if mode == RoundingMode.STOCHASTIC and rng is None:
        raise MissingRngError()
    x = np.asarray(x, dtype=np.float64)
    if fmt.is_wide:
        return x + 0.0
    _check_finite(x)
    unscaled = np.clip(np.ldexp(x, -scale.exponent), fmt.min_value, fmt.max_value)
    k, ulp = fmt.grid(unscaled)
    frac = unscaled / ulp - k
    if mode == RoundingMode.TRUNCATE:
        up = np.zeros(frac.shape, dtype=bool)
    elif mode == RoundingMode.NEAREST:
        up = (frac > 0.5) | ((frac == 0.5) & (np.mod(k, 2.0) != 0.0))
    else:
        up = rng.random(size=frac.shape) < frac
    rounded = (k + up) * ulp
    # + 0.0 folds negative zero into zero.
    return np.ldexp(rounded, scale.exponent) + 0.0


def is_representable(x: np.ndarray, fmt: NumericFormat, scale: GlobalScale = UNSCALED) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    finite = np.isfinite(x)
    if fmt.is_wide:
        return finite
    safe = np.where(finite, x, 0.0)
    return finite & (quantize_array(safe, fmt, scale, RoundingMode.NEAREST) == safe)


def _scalar(x: Union[float, int]) -> np.ndarray:
    if not np.isfinite(x):
        raise DomainError(f"Cannot quantize the non-finite value {x}")
    return np.asarray([x], dtype=np.float64)


def grid_neighbors(x: float, fmt: NumericFormat, scale: GlobalScale = UNSCALED) -> Tuple[float, float]:
    arr = _scalar(x)
    if fmt.is_wide:
        return float(x), float(x)
    unscaled = np.ldexp(arr, -scale.exponent)
    k, ulp = fmt.grid(unscaled)
    lo = float(np.ldexp(k * ulp, scale.exponent)[0]) + 0.0
    if lo == float(x):
        return lo, lo
    hi = float(np.ldexp((k + 1.0) * ulp, scale.exponent)[0])
    return lo, hi


def saturate(x: float, fmt: NumericFormat, scale: GlobalScale = UNSCALED) -> float:
    return float(saturate_array(_scalar(x), fmt, scale)[0])


def stochastic_round(x: float, fmt: NumericFormat, scale: GlobalScale, rng: np.random.Generator) -> float:
    return quantize(x, fmt, scale, RoundingMode.STOCHASTIC, rng)


def quantize(x: float, fmt: NumericFormat, scale: GlobalScale = UNSCALED,
             mode: RoundingMode = RoundingMode.NEAREST, rng: Optional[np.random.Generator] = None) -> float:
    return float(quantize_array(_scalar(x), fmt, scale, mode, rng)[0])


def enumerate_codepoints(fmt: NumericFormat) -> np.ndarray:
    """
    Every representable value of `fmt`, strictly increasing, with negative zero collapsed.
    """
    if fmt.is_wide or fmt.width > MAX_WIDTH:
        raise FormatError(f"Cannot enumerate {fmt}: only formats up to {MAX_WIDTH} bits are enumerable")
    if isinstance(fmt, FixedFormat):
        n = fmt.width
        return np.ldexp(np.arange(-2 ** (n - 1), 2 ** (n - 1), dtype=np.float64), -fmt.frac_bits)
    mantissas = np.arange(2 ** fmt.man_bits, dtype=np.float64)
    subnormals = np.ldexp(mantissas, fmt.emin - fmt.man_bits)
    exponents = np.arange(fmt.emin, fmt.emax + 1)
    normals = np.ldexp(2.0 ** fmt.man_bits + mantissas[None, :], (exponents - fmt.man_bits)[:, None]).ravel()
    positives = np.concatenate([subnormals, normals])
    return np.unique(np.concatenate([-positives, positives]))
