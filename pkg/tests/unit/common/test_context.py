from typing import Dict

import numpy as np
import pytest

from lpnum.common.context import (Context, ContextFormat, ContextRegistry, ParameterClass, band, compute_scale_factor,
                                  context_quantize, refresh_contexts, rescale)
from lpnum.common.errors import ContextError
from lpnum.common.models import OpTally
from lpnum.common.qformats import FixedFormat, RoundingMode, context_float_base, enumerate_codepoints
from lpnum.common.util import RngStreams


class FakeModel:
    def __init__(self, tensors: Dict[str, np.ndarray], base):
        self.contexts = ContextRegistry()
        self.tensors = tensors
        self.base = base

    def context_base(self, cls):
        return self.base

    def class_tensors(self, cls):
        return dict(self.tensors)

    def set_class_tensor(self, layer, cls, values):
        self.tensors[layer] = values


class TestScaleFactor:

    @staticmethod
    @pytest.mark.parametrize("values, expected",
                             [
                                 ([1.0, 4.0], 1),
                                 ([0.5, 0.5, 0.5], -1),
                                 ([0.0, 8.0], 3),
                                 ([0.0, 0.0], 0),
                                 ([-2.0 ** -7] * 10, -7),
                                 ([3.0], 2),
                             ])
    def test_scale_exponent(values, expected):
        assert compute_scale_factor(np.array(values)).scale_exponent == expected

    @staticmethod
    def test_member_count_includes_zeros():
        ctx = compute_scale_factor(np.array([0.0, 1.0, 2.0]), "fc1/weights")
        assert ctx.member_count == 3
        assert ctx.id == "fc1/weights"

    @staticmethod
    def test_empty_context():
        with pytest.raises(ContextError):
            compute_scale_factor(np.array([]), "conv1/gradients")

    @staticmethod
    @pytest.mark.parametrize("shift", [-9, -1, 3, 5])
    def test_shift_equivariance(shift: int):
        x = RngStreams(11).stream("values").normal(0, 0.05, size=400)
        before = compute_scale_factor(x)
        after = compute_scale_factor(np.ldexp(x, shift))
        assert after.scale_exponent == before.scale_exponent + shift


class TestContextQuantize:

    @staticmethod
    def test_context_fixed_grid():
        cf = ContextFormat(FixedFormat(6, 6), Context("c", -4))
        assert context_quantize(0.011, cf) == 11 * 2.0 ** -10
        assert context_quantize(0.0, cf) == 0.0

    @staticmethod
    def test_context_float_power_of_two():
        cf = ContextFormat(context_float_base(4, 7), Context("c", -6))
        assert context_quantize(2.0 ** -3, cf) == 2.0 ** -3

    @staticmethod
    def test_relative_exponent_zero_binade():
        ctx = Context("c", -5)
        cf = ContextFormat(context_float_base(4, 7), ctx)
        x = np.linspace(2.0 ** -5, 2.0 ** -4, 50, endpoint=False)
        out = context_quantize(x, cf, RoundingMode.TRUNCATE)
        assert np.all(out >= ctx.scale)
        assert np.all(out < 2 * ctx.scale)

    @staticmethod
    def test_outputs_are_scaled_codepoints():
        ctx = Context("c", 3)
        base = FixedFormat(6, 6)
        x = RngStreams(2).stream("x").uniform(-200, 200, size=300)
        out = context_quantize(x, ContextFormat(base, ctx), RoundingMode.STOCHASTIC, RngStreams(2).stream("q"))
        assert np.all(np.isin(out / ctx.scale, enumerate_codepoints(base)))

    @staticmethod
    def test_shape_is_preserved():
        cf = ContextFormat(FixedFormat(6, 6), Context("c", 0))
        assert context_quantize(np.zeros((2, 3)), cf).shape == (2, 3)

    @staticmethod
    def test_band():
        lo, hi = band(ContextFormat(context_float_base(4, 7), Context("c", 0)))
        assert (lo, hi) == (2.0 ** -14, 255.0)
        lo, hi = band(ContextFormat(context_float_base(4, 7), Context("c", -3)))
        assert (lo, hi) == (2.0 ** -17, 255.0 / 8)

    @staticmethod
    def test_string_form():
        assert str(ContextFormat(FixedFormat(6, 6), Context("c", -4))) == "ctx-fixed[6,6]@2^-4"
        assert str(ContextFormat(context_float_base(4, 7), Context("c", 2))) == "ctx-float[4,7]@2^2"


class TestRescale:

    @staticmethod
    def test_value_preserved_and_counted():
        tally = OpTally()
        a, b = Context("a", -2), Context("b", -5)
        assert rescale(0.25, a, b, tally) == 0.25
        assert tally["scale_adjust"] == 1
        assert rescale(rescale(0.25, a, b, tally), b, a, tally) == 0.25
        assert tally["scale_adjust"] == 3

    @staticmethod
    def test_counts_every_element():
        tally = OpTally()
        rescale(np.ones((4, 5)), Context("a"), Context("b"), tally)
        assert tally["scale_adjust"] == 20

    @staticmethod
    def test_counts_per_operation():
        tally = OpTally()
        rescale(np.ones(3), Context("a"), Context("b"), tally, per=4)
        assert tally["scale_adjust"] == 12


class TestRegistry:

    @staticmethod
    def test_update_and_snapshot():
        registry = ContextRegistry()
        registry.update("fc1", ParameterClass.WEIGHTS, np.full(4, 2.0 ** -7))
        registry.update("conv1", ParameterClass.OUTPUTS, np.full(4, 8.0))
        assert registry.get("fc1", "weights").scale_exponent == -7
        assert registry.snapshot() == {"conv1/outputs": 3, "fc1/weights": -7}
        assert len(registry) == 2

    @staticmethod
    def test_unknown_context():
        with pytest.raises(ContextError):
            ContextRegistry().get("fc1", ParameterClass.BIASES)

    @staticmethod
    def test_registry_rescale_tallies():
        registry = ContextRegistry()
        registry.rescale(np.ones(7), Context("a"), Context("b"))
        assert registry.tally["scale_adjust"] == 7
        step = OpTally()
        registry.rescale(np.ones(7), Context("a"), Context("b"), tally=step, per=2)
        assert step["scale_adjust"] == 14
        assert registry.tally["scale_adjust"] == 7

    @staticmethod
    def test_lookup_falls_back_to_unit_scale():
        registry = ContextRegistry()
        assert registry.lookup("conv1", ParameterClass.OUTPUTS) == Context("conv1/outputs")
        registry.update("conv1", ParameterClass.OUTPUTS, np.full(4, 8.0))
        assert registry.lookup("conv1", "outputs").scale_exponent == 3

    @staticmethod
    def test_scale_change_is_logged(caplog):
        registry = ContextRegistry()
        registry.update("fc1", ParameterClass.WEIGHTS, np.full(4, 1.0))
        with caplog.at_level("DEBUG", logger="rich"):
            registry.update("fc1", ParameterClass.WEIGHTS, np.full(4, 4.0))
        assert "fc1/weights moved from 2^0 to 2^2" in caplog.text


class TestRefresh:

    @staticmethod
    def test_refresh_requantizes_members():
        model = FakeModel({"fc1": np.full(6, 2.0 ** -7 * 1.3), "fc2": np.zeros(3)}, FixedFormat(6, 6))
        refreshed = refresh_contexts(model, ParameterClass.WEIGHTS)
        assert refreshed["fc1/weights"].scale_exponent == -7
        assert refreshed["fc2/weights"].scale_exponent == 0
        assert np.all(model.tensors["fc2"] == 0.0)
        assert np.allclose(model.tensors["fc1"], np.round(1.3 * 64) / 64 * 2.0 ** -7)

    @staticmethod
    def test_refresh_is_shift_equivariant():
        x = RngStreams(9).stream("x").normal(0, 0.01, size=(8, 8))
        a = FakeModel({"conv1": x.copy()}, context_float_base(4, 7))
        b = FakeModel({"conv1": np.ldexp(x, 5)}, context_float_base(4, 7))
        ca = refresh_contexts(a, "gradients", RoundingMode.STOCHASTIC, RngStreams(9).stream("q"))
        cb = refresh_contexts(b, "gradients", RoundingMode.STOCHASTIC, RngStreams(9).stream("q"))
        assert cb["conv1/gradients"].scale_exponent == ca["conv1/gradients"].scale_exponent + 5
        assert np.array_equal(b.tensors["conv1"], np.ldexp(a.tensors["conv1"], 5))
