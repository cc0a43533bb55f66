"""
Context (locally scaled) representations.

A context groups the tensors of one parameter class in one layer under a single power-of-two
scale factor derived from the mean log2 magnitude of its members. Context-fixed and
context-float formats are the plain fixed/float grids translated by that factor.
"""
import logging
from dataclasses import dataclass
from enum import Enum
from typing import TYPE_CHECKING, Dict, Optional, Tuple, Union

import numpy as np

from lpnum.common.errors import ContextError
from lpnum.common.models import OpTally
from lpnum.common.qformats import FloatFormat, GlobalScale, NumericFormat, RoundingMode, quantize_array

if TYPE_CHECKING:
    from lpnum.common.network import NetworkState

logger = logging.getLogger("rich")


class ParameterClass(str, Enum):
    WEIGHTS = "weights"
    BIASES = "biases"
    OUTPUTS = "outputs"
    GRADIENTS = "gradients"
    WEIGHT_UPDATES = "weight_updates"
    BIAS_UPDATES = "bias_updates"


@dataclass(frozen=True)
class Context:
    id: str
    scale_exponent: int = 0
    member_count: int = 0

    @property
    def scale(self) -> float:
        return 2.0 ** self.scale_exponent


@dataclass(frozen=True)
class ContextFormat:
    base: NumericFormat
    context: Context

    @property
    def scale(self) -> GlobalScale:
        return GlobalScale(self.context.scale_exponent)

    def __str__(self) -> str:
        prefix = "ctx-float" if isinstance(self.base, FloatFormat) else "ctx-fixed"
        if isinstance(self.base, FloatFormat):
            return f"{prefix}[{self.base.exp_bits},{self.base.man_bits}]@2^{self.context.scale_exponent}"
        return f"{prefix}[{self.base.int_bits},{self.base.frac_bits}]@2^{self.context.scale_exponent}"


def compute_scale_factor(values: np.ndarray, context_id: str = "") -> Context:
    """
    Rounds the mean of log2|x| over the nonzero members to the nearest integer. An all-zero
    collection gets exponent 0.

    The mean is split into an integer part (from the binary exponents) and a remainder so
    that scaling every member by 2^m shifts the result by exactly m.
    """
    flat = np.asarray(values, dtype=np.float64).ravel()
    if flat.size == 0:
        raise ContextError(f"Cannot compute a scale factor for the empty context '{context_id}'")
    nonzero = np.abs(flat[flat != 0.0])
    if nonzero.size == 0:
        return Context(id=context_id, scale_exponent=0, member_count=int(flat.size))
    mantissas, exponents = np.frexp(nonzero)
    n = int(nonzero.size)
    whole, remainder = divmod(int(np.sum(exponents.astype(np.int64))), n)
    fraction = (remainder + float(np.sum(np.log2(mantissas)))) / n
    exponent = whole + int(np.rint(fraction))
    return Context(id=context_id, scale_exponent=exponent, member_count=int(flat.size))


def context_quantize(x: Union[float, np.ndarray], cf: ContextFormat, mode: RoundingMode = RoundingMode.NEAREST,
                     rng: Optional[np.random.Generator] = None) -> Union[float, np.ndarray]:
    result = quantize_array(np.atleast_1d(x), cf.base, cf.scale, mode, rng)
    if np.ndim(x) == 0:
        return float(result[0])
    return result.reshape(np.shape(x))


def rescale(x: Union[float, np.ndarray], source: Context, target: Context,
            tally: Optional[OpTally] = None, per: int = 1) -> Union[float, np.ndarray]:
    """
    Hands the members of `source` to operations against members of `target`; each of the
    `per` operations every member takes part in costs one scale adjustment.
    """
    if tally is not None:
        tally.record("scale_adjust", int(np.size(x)) * per)
    return x


def band(cf: ContextFormat) -> Tuple[float, float]:
    """
    Smallest positive and largest magnitude of the scaled representable set; weights outside
    the band saturate or flush to zero.
    """
    return cf.base.min_positive * cf.context.scale, cf.base.max_value * cf.context.scale


class ContextRegistry:
    """
    Every context of a network keyed "<layer>/<class>".
    """

    def __init__(self):
        self.contexts: Dict[str, Context] = {}
        self.tally = OpTally()

    @staticmethod
    def key(layer: str, cls: ParameterClass) -> str:
        return f"{layer}/{ParameterClass(cls).value}"

    def get(self, layer: str, cls: ParameterClass) -> Context:
        key = self.key(layer, cls)
        if key not in self.contexts:
            raise ContextError(f"Unknown context '{key}'")
        return self.contexts[key]

    def update(self, layer: str, cls: ParameterClass, values: np.ndarray) -> Context:
        key = self.key(layer, cls)
        ctx = compute_scale_factor(values, key)
        previous = self.contexts.get(key)
        if previous is not None and previous.scale_exponent != ctx.scale_exponent:
            logger.debug("Context %s moved from 2^%d to 2^%d", key, previous.scale_exponent, ctx.scale_exponent)
        self.contexts[key] = ctx
        return ctx

    def set(self, ctx: Context) -> None:
        self.contexts[ctx.id] = ctx

    def lookup(self, layer: str, cls: ParameterClass) -> Context:
        key = self.key(layer, cls)
        return self.contexts.get(key) or Context(id=key)

    def rescale(self, x, source: Context, target: Context, tally: Optional[OpTally] = None, per: int = 1):
        return rescale(x, source, target, tally if tally is not None else self.tally, per)

    def snapshot(self) -> Dict[str, int]:
        return {key: self.contexts[key].scale_exponent for key in sorted(self.contexts)}

    def __len__(self) -> int:
        return len(self.contexts)


def refresh_contexts(model: "NetworkState", cls: ParameterClass, mode: RoundingMode = RoundingMode.NEAREST,
                     rng: Optional[np.random.Generator] = None) -> Dict[str, Context]:
    """
    Recomputes the scale factor of every context of `cls` from the model's current values and
    re-quantizes the members under the new scale.

    The model must expose `contexts` (a ContextRegistry), `context_base(cls)` and
    `class_tensors(cls)` / `set_class_tensor(layer, cls, values)`.
    """
    cls = ParameterClass(cls)
    base = model.context_base(cls)
    refreshed: Dict[str, Context] = {}
    for layer, values in model.class_tensors(cls).items():
        ctx = model.contexts.update(layer, cls, values)
        model.set_class_tensor(layer, cls, context_quantize(values, ContextFormat(base, ctx), mode, rng))
        refreshed[ctx.id] = ctx
    return refreshed
