import json
import logging
import os
from enum import Enum
from typing import Callable, Dict, Optional, Sequence, Union

import numpy as np

from lpnum.common.context import Context, ContextFormat
from lpnum.common.errors import FormatError, ShapeMismatch
from lpnum.common.models import OpTally
from lpnum.common.qformats import (WIDE, FormatSpec, GlobalScale, NumericFormat, RoundingMode, UNSCALED,
                                   is_representable, parse_format, quantize_array)

logger = logging.getLogger("rich")

Format = Union[NumericFormat, ContextFormat]


class Kernel(str, Enum):
    BLAS = "blas"
    MULTIPLY = "multiply"
    SHIFT = "shift"


def resolve_grid(fmt: Format, scale: GlobalScale = UNSCALED):
    if isinstance(fmt, ContextFormat):
        return fmt.base, fmt.scale
    return fmt, scale


def format_literal(fmt: Format, scale: GlobalScale = UNSCALED) -> str:
    if isinstance(fmt, ContextFormat):
        return str(FormatSpec(base=fmt.base, contextual=True))
    return str(FormatSpec(base=fmt, scale=scale))


class QTensor:
    """
    A wide (binary64) array whose elements are constrained to `fmt`.
    """
    data: np.ndarray
    fmt: Format
    scale: GlobalScale

    def __init__(self, data, fmt: Format = WIDE, scale: GlobalScale = UNSCALED):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.fmt = fmt
        self.scale = scale

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def context(self) -> Optional[Context]:
        return self.fmt.context if isinstance(self.fmt, ContextFormat) else None

    def representable(self) -> np.ndarray:
        base, scale = resolve_grid(self.fmt, self.scale)
        return is_representable(self.data, base, scale)

    def check(self) -> "QTensor":
        ok = self.representable()
        if not np.all(ok):
            index = int(np.argmin(ok.ravel()))
            value = float(self.data.ravel()[index])
            raise FormatError(f"Element {index} ({value!r}) is not representable in "
                              f"{format_literal(self.fmt, self.scale)}")
        return self

    def dump(self, path: str) -> None:
        """
        Writes `<path>.bin` (flat little-endian binary64, row-major) and `<path>.json`.
        """
        directory = os.path.dirname(path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        with open(f"{path}.bin", "wb") as f:
            f.write(self.data.astype("<f8").tobytes(order="C"))
        ctx = self.context
        sidecar = {
            "shape": list(self.shape),
            "fmt": format_literal(self.fmt, self.scale),
            "context": ctx.id if ctx else None,
            "scale_exponent": ctx.scale_exponent if ctx else None,
        }
        with open(f"{path}.json", "w") as f:
            json.dump(sidecar, f, sort_keys=True, indent=2)

    @classmethod
    def load(cls, path: str) -> "QTensor":
        with open(f"{path}.json", "r") as f:
            sidecar = json.load(f)
        data = np.fromfile(f"{path}.bin", dtype="<f8")
        shape = tuple(sidecar["shape"])
        if data.size != int(np.prod(shape, dtype=np.int64)):
            raise ShapeMismatch(f"{path}.bin holds {data.size} values, the sidecar declares shape {shape}")
        spec = parse_format(sidecar["fmt"])
        if spec.contextual:
            ctx = Context(id=sidecar["context"], scale_exponent=int(sidecar["scale_exponent"]),
                          member_count=data.size)
            return cls(data.reshape(shape), ContextFormat(spec.base, ctx))
        return cls(data.reshape(shape), spec.base, spec.scale)

    def __repr__(self) -> str:
        return f"QTensor(shape={self.shape}, fmt={format_literal(self.fmt, self.scale)})"


class Accumulator:
    """
    Wide accumulator: terms are summed in index order and never rounded mid-reduction.
    """

    def __init__(self, tally: Optional[OpTally] = None):
        self.value = 0.0
        self.tally = tally if tally is not None else OpTally()

    def accumulate(self, terms: np.ndarray) -> float:
        terms = np.asarray(terms, dtype=np.float64).ravel()
        if terms.size:
            # cumsum reduces strictly left to right, unlike np.sum's pairwise reduction.
            self.value = float(np.cumsum(np.concatenate([[self.value], terms]))[-1])
        return self.value


def _as_vector(t: Union[QTensor, Sequence[float], np.ndarray]) -> np.ndarray:
    data = t.data if isinstance(t, QTensor) else np.asarray(t, dtype=np.float64)
    return data.ravel()


def pot_decompose(x: np.ndarray):
    """
    Splits power-of-two constrained values into (negative, exponent, zero) masks; x = ±2^exponent.
    """
    mantissa, exponent = np.frexp(x)
    zero = x == 0.0
    if not np.all(zero | (np.abs(mantissa) == 0.5)):
        raise FormatError("Shift kernels need power-of-two constrained operands ({0} or ±2^y)")
    return mantissa < 0, exponent - 1, zero


def dot(a, b, out_fmt: Format = WIDE, mode: RoundingMode = RoundingMode.NEAREST,
        rng: Optional[np.random.Generator] = None, tally: Optional[OpTally] = None,
        scale: GlobalScale = UNSCALED) -> float:
    va, vb = _as_vector(a), _as_vector(b)
    if va.size != vb.size:
        raise ShapeMismatch(f"dot operands have lengths {va.size} and {vb.size}")
    acc = Accumulator(tally)
    acc.tally.record("mul", va.size)
    acc.tally.record("add", max(va.size - 1, 0))
    acc.accumulate(va * vb)
    base, scale = resolve_grid(out_fmt, scale)
    return float(quantize_array(np.asarray([acc.value]), base, scale, mode, rng)[0])


def shift_dot(w, x, out_fmt: Format = WIDE, mode: RoundingMode = RoundingMode.NEAREST,
              rng: Optional[np.random.Generator] = None, tally: Optional[OpTally] = None,
              scale: GlobalScale = UNSCALED) -> float:
    vw, vx = _as_vector(w), _as_vector(x)
    if vw.size != vx.size:
        raise ShapeMismatch(f"shift_dot operands have lengths {vw.size} and {vx.size}")
    negative, exponent, zero = pot_decompose(vx)
    shifted = np.ldexp(vw, exponent)
    terms = np.where(zero, 0.0, np.where(negative, -shifted, shifted))
    acc = Accumulator(tally)
    acc.tally.record("shift", int(np.count_nonzero(~zero)))
    acc.tally.record("add", max(vw.size - 1, 0))
    acc.accumulate(terms)
    base, scale = resolve_grid(out_fmt, scale)
    return float(quantize_array(np.asarray([acc.value]), base, scale, mode, rng)[0])


def quantize_tensor(t: Union[QTensor, np.ndarray], fmt: Format, mode: RoundingMode = RoundingMode.NEAREST,
                    rng: Optional[np.random.Generator] = None, scale: GlobalScale = UNSCALED) -> QTensor:
    data = t.data if isinstance(t, QTensor) else np.asarray(t, dtype=np.float64)
    base, grid_scale = resolve_grid(fmt, scale)
    return QTensor(quantize_array(data, base, grid_scale, mode, rng), fmt, scale)


_ELEMENTWISE: Dict[str, Callable] = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
    "max": np.maximum,
}
_ELEMENTWISE_OP_KIND = {"add": "add", "sub": "add", "mul": "mul", "max": "cmp"}


def elementwise(op: str, a, b, out_fmt: Format = WIDE, mode: RoundingMode = RoundingMode.NEAREST,
                rng: Optional[np.random.Generator] = None, tally: Optional[OpTally] = None,
                scale: GlobalScale = UNSCALED) -> QTensor:
    if op not in _ELEMENTWISE:
        raise ValueError(f"Unsupported elementwise op '{op}'")
    da = a.data if isinstance(a, QTensor) else np.asarray(a, dtype=np.float64)
    db = b.data if isinstance(b, QTensor) else np.asarray(b, dtype=np.float64)
    try:
        result = _ELEMENTWISE[op](da, db)
    except ValueError as e:
        raise ShapeMismatch(f"Cannot broadcast shapes {da.shape} and {db.shape}") from e
    if tally is not None:
        tally.record(_ELEMENTWISE_OP_KIND[op], int(result.size))
    return quantize_tensor(result, out_fmt, mode, rng, scale)


# Upper bound on the product terms materialised per block of the sequential kernels.
BLOCK_TERMS = 1 << 21


def _reduce_in_order(m: int, n: int, p: int, terms) -> np.ndarray:
    """
    Sums `terms(start, stop)`, an (m, stop - start, p) block, over the shared axis in ascending
    index order. `np.add.accumulate` is a left fold, so blocking does not change the result.
    """
    acc = np.zeros((m, 1, p), dtype=np.float64)
    step = max(1, BLOCK_TERMS // max(m * p, 1))
    for start in range(0, n, step):
        block = np.concatenate([acc, terms(start, min(n, start + step))], axis=1)
        acc = np.add.accumulate(block, axis=1)[:, -1:, :]
    return acc[:, 0, :]


def _signed(shifted: np.ndarray, negative: np.ndarray, zero: np.ndarray) -> np.ndarray:
    return np.where(zero, 0.0, np.where(negative, -shifted, shifted))


def matmul(a: np.ndarray, b: np.ndarray, kernel: Kernel = Kernel.BLAS, tally: Optional[OpTally] = None,
           pot_operand: Optional[str] = None) -> np.ndarray:
    """
    Batched lowering of `dot`: every output element is a wide reduction over the shared axis.

    `multiply` and `shift` reduce in ascending index order, so the two are bit-identical when
    the `pot_operand` side ("a" or "b") is power-of-two constrained. `blas` leaves the order to
    the BLAS library and is only reproducible on the same build; it still tallies shifts
    when a `pot_operand` is named.
    """
    kernel = Kernel(kernel)
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"Cannot multiply shapes {a.shape} and {b.shape}")
    if pot_operand not in (None, "a", "b"):
        raise ValueError(f"pot_operand must be 'a', 'b' or None, not {pot_operand!r}")
    if kernel == Kernel.SHIFT and pot_operand is None:
        raise ValueError("The shift kernel needs a power-of-two operand")
    m, n = a.shape
    p = b.shape[1]
    decomposed = None
    if pot_operand is not None and kernel != Kernel.MULTIPLY:
        decomposed = pot_decompose(a if pot_operand == "a" else b)
    if tally is not None:
        tally.record("add", m * p * max(n - 1, 0))
        if decomposed is None:
            tally.record("mul", m * n * p)
        else:
            tally.record("shift", int(np.count_nonzero(~decomposed[2])) * (p if pot_operand == "a" else m))
    if kernel == Kernel.BLAS:
        return a @ b
    if kernel == Kernel.MULTIPLY:
        return _reduce_in_order(m, n, p, lambda s, e: a[:, s:e, None] * b[None, s:e, :])
    negative, exponent, zero = decomposed
    if pot_operand == "a":
        return _reduce_in_order(m, n, p, lambda s, e: _signed(
            np.ldexp(b[None, s:e, :], exponent[:, s:e, None]),
            negative[:, s:e, None], zero[:, s:e, None]))
    return _reduce_in_order(m, n, p, lambda s, e: _signed(
        np.ldexp(a[:, s:e, None], exponent[None, s:e, :]),
        negative[None, s:e, :], zero[None, s:e, :]))
