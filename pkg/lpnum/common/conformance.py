import logging
import math
import time
from fractions import Fraction
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from lpnum.common.config import TrainConfig
from lpnum.common.data import SyntheticSpec, synthesize
from lpnum.common.errors import ConformanceFailure
from lpnum.common.models import ConformanceResult
from lpnum.common.network import NetworkState, SchemeConfig, backward, build_topology, forward, loss
from lpnum.common.qformats import (FixedFormat, FloatFormat, NumericFormat, RoundingMode, WIDE,
                                   enumerate_codepoints, quantize_array)
from lpnum.common.qtensor import Kernel, dot, matmul, shift_dot
from lpnum.common.trainer import Trainer
from lpnum.common.util import RngStreams

logger = logging.getLogger("rich")

CODEPOINT_FORMATS: List[Tuple[NumericFormat, int]] = [
    (FixedFormat(0, 12), 0),
    (FixedFormat(6, 6), 0),
    (FloatFormat(5, 6), 2 ** 4 - 1),
    (FloatFormat(4, 7), 2 ** 3 - 1),
    (FloatFormat(6, 0), 2 ** 5 - 1),
    (FloatFormat(4, 7, bias=8), 8),
]


def decode(code: int, fmt: NumericFormat, bias: int) -> Fraction:
    """
    Bit pattern -> exact value, straight from the encoding definitions.
    """
    if isinstance(fmt, FixedFormat):
        n = fmt.int_bits + fmt.frac_bits
        signed = code - (1 << n) if code >= 1 << (n - 1) else code
        return Fraction(signed, 1 << fmt.frac_bits)
    e, m = fmt.exp_bits, fmt.man_bits
    sign = -1 if code >> (e + m) else 1
    field = (code >> m) & ((1 << e) - 1)
    mantissa = code & ((1 << m) - 1)
    if field == 0:
        magnitude = Fraction(mantissa) * Fraction(2) ** (1 - bias - m)
    else:
        magnitude = Fraction((1 << m) + mantissa) * Fraction(2) ** (field - bias - m)
    return sign * magnitude


def check_codepoints(fmt: NumericFormat, bias: int) -> Optional[str]:
    codes = 1 << fmt.width
    decoded: Dict[Fraction, int] = {}
    for code in range(codes):
        decoded.setdefault(decode(code, fmt, bias), code)
    enumerated = enumerate_codepoints(fmt)
    expected = sorted(decoded)
    if enumerated.size != len(expected) or any(Fraction(float(v)) != x for v, x in zip(enumerated, expected)):
        listed = {Fraction(float(v)) for v in enumerated}
        for value in expected:
            if value not in listed:
                return f"{fmt}: code {decoded[value]:#x} decodes to {float(value)!r}, which is not enumerated"
        return f"{fmt}: enumerates {enumerated.size} values, the encoding has {len(expected)}"
    if not np.array_equal(quantize_array(enumerated, fmt), enumerated):
        return f"{fmt}: nearest rounding moves a codepoint"
    lo, hi = enumerated[:-1], enumerated[1:]
    midpoints = lo + (hi - lo) / 2
    spacing = hi - lo
    expected_ties = np.where(np.mod(lo / spacing, 2.0) == 0.0, lo, hi)
    got = quantize_array(midpoints, fmt)
    if not np.array_equal(got, expected_ties):
        i = int(np.argmax(got != expected_ties))
        return f"{fmt}: the midpoint {midpoints[i]!r} rounds to {got[i]!r}, ties-to-even gives {expected_ties[i]!r}"
    return None


def codepoints_suite(quick: bool, seed: int) -> Optional[str]:
    for fmt, bias in CODEPOINT_FORMATS:
        failure = check_codepoints(fmt, bias)
        if failure:
            return failure
    return None


def rounding_suite(quick: bool, seed: int) -> Optional[str]:
    points, draws = (100, 10 ** 4) if quick else (1000, 10 ** 5)
    streams = RngStreams(seed)
    # 4 sigma per point, widened for the number of points so a correct rounding fails
    # with probability below 1e-4 over the whole suite.
    total = points * len(CODEPOINT_FORMATS)
    z = max(4.0, math.sqrt(2.0 * math.log(total / 1e-4)))
    for fmt, _ in CODEPOINT_FORMATS:
        grid = enumerate_codepoints(fmt)
        pick = streams.stream("points", str(fmt))
        idx = pick.integers(0, grid.size - 1, size=points)
        lo, hi = grid[idx], grid[idx + 1]
        x = lo + pick.uniform(0.01, 0.99, size=points) * (hi - lo)
        for i in range(points):
            rng = streams.stream("draws", str(fmt), i)
            rounded = quantize_array(np.full(draws, x[i]), fmt, mode=RoundingMode.STOCHASTIC, rng=rng)
            p = (x[i] - lo[i]) / (hi[i] - lo[i])
            sigma = (hi[i] - lo[i]) * math.sqrt(p * (1 - p) / draws)
            if abs(float(np.mean(rounded)) - x[i]) > z * sigma:
                return f"{fmt}: mean of {draws} stochastic roundings of {x[i]!r} is {np.mean(rounded)!r}"
    return None


def _pot_epoch(kernel: str, seed: int, quick: bool) -> NetworkState:
    spec = SyntheticSpec(classes=10, samples_per_class=4 if quick else 10, image_size=16, separation=1.0, seed=seed)
    topology = build_topology((3, 16, 16), 10, widths=(4, 4, 8), fc_width=32)
    state = NetworkState(topology, SchemeConfig.from_name("pot"), RoundingMode.STOCHASTIC, seed=seed, kernel=kernel)
    ds = synthesize(spec)
    Trainer(state, ds, ds, TrainConfig(batch_size=20, epochs=1)).run()
    return state


def shift_suite(quick: bool, seed: int) -> Optional[str]:
    pairs = 500 if quick else 10 ** 4
    streams = RngStreams(seed)
    weights = enumerate_codepoints(FixedFormat(0, 12))
    powers = enumerate_codepoints(FloatFormat(6, 0))
    a = matmul(weights[:, None], powers[None, :], Kernel.MULTIPLY)
    b = matmul(weights[:, None], powers[None, :], Kernel.SHIFT, pot_operand="b")
    if not np.array_equal(a, b):
        return "shift and multiply kernels disagree on single products of codepoints"
    pick = streams.stream("pairs")
    for i in range(pairs):
        n = int(pick.integers(1, 513))
        w = weights[pick.integers(0, weights.size, size=n)]
        x = powers[pick.integers(0, powers.size, size=n)]
        expected, got = dot(w, x, WIDE), shift_dot(w, x, WIDE)
        if expected != got or math.copysign(1.0, expected) != math.copysign(1.0, got):
            return f"pair {i} (length {n}): dot gives {expected!r}, shift_dot gives {got!r}"
    shifted, multiplied = _pot_epoch("exact", seed, quick), _pot_epoch("exact-multiply", seed, quick)
    for layer in shifted.params:
        for slot in ("weights", "biases"):
            if not np.array_equal(shifted.params[layer][slot], multiplied.params[layer][slot]):
                return f"after one power-of-two epoch, {layer} {slot} differ between shift and multiply kernels"
    return None


def gradients_suite(quick: bool, seed: int) -> Optional[str]:
    topology = build_topology((3, 16, 16), 3, widths=(2, 3, 4), fc_width=6)
    state = NetworkState(topology, SchemeConfig.from_name("fp32-baseline"), RoundingMode.NEAREST, seed=seed)
    streams = RngStreams(seed)
    init = streams.stream("gradcheck")
    for layer in topology.parametric:
        state.params[layer.name]["weights"] = init.normal(0.0, 0.3, size=layer.weight_shape)
        state.params[layer.name]["biases"] = init.normal(0.0, 0.1, size=layer.out_channels)
    images = init.uniform(0.0, 1.0, size=(4,) + topology.input_shape)
    labels = init.integers(0, 3, size=4)

    def objective() -> float:
        logits, _ = forward(state, images, training=False, key=("gradcheck",))
        return loss(logits, labels)

    _, cache = forward(state, images, training=False, key=("gradcheck",))
    grads = backward(state, cache, labels)
    h = 1e-6
    samples = 3 if quick else 8
    for layer in topology.parametric:
        for slot in ("weights", "biases"):
            values = state.params[layer.name][slot]
            for index in init.integers(0, values.size, size=samples):
                flat = values.reshape(-1)
                original = flat[index]
                flat[index] = original + h
                up = objective()
                flat[index] = original - h
                down = objective()
                flat[index] = original
                numeric = (up - down) / (2 * h)
                analytic = float(grads[layer.name][slot].reshape(-1)[index])
                error = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-4)
                if error > 1e-4:
                    return (f"{layer.name} {slot}[{int(index)}]: analytic {analytic!r} vs finite difference "
                            f"{numeric!r} (relative error {error:.2e})")
    return None


SUITES: Dict[str, Callable[[bool, int], Optional[str]]] = {
    "codepoints": codepoints_suite,
    "rounding": rounding_suite,
    "shift": shift_suite,
    "gradients": gradients_suite,
}


def run_conformance(suites: Sequence[str] = None, quick: bool = False, seed: int = 0,
                    raise_on_failure: bool = False) -> List[ConformanceResult]:
    results = []
    for name in suites or SUITES:
        if name not in SUITES:
            raise ValueError(f"Unknown conformance suite '{name}'; known suites are {', '.join(SUITES)}")
        logger.info("Running the %s suite", name)
        started = time.perf_counter()
        failure = SUITES[name](quick, seed)
        result = ConformanceResult(name, failure is None, failure or "", seed, time.perf_counter() - started)
        if failure:
            logger.error("Suite %s failed: %s", name, failure)
            if raise_on_failure:
                raise ConformanceFailure(name, failure, seed)
        results.append(result)
    return results
