import json
import os

import numpy as np
import pytest

from lpnum.common.context import Context, ContextFormat
from lpnum.common.errors import FormatError, ShapeMismatch
from lpnum.common.models import OpTally
from lpnum.common.qformats import (FixedFormat, FloatFormat, GlobalScale, RoundingMode, context_float_base,
                                   enumerate_codepoints)
from lpnum.common.qtensor import (Accumulator, Kernel, QTensor, dot, elementwise, matmul, pot_decompose,
                                  quantize_tensor, shift_dot)
from lpnum.common.util import RngStreams


def pot_values(shape, seed: int = 0) -> np.ndarray:
    rng = RngStreams(seed).stream("pot")
    exponents = rng.integers(-8, 3, size=shape)
    signs = rng.choice([-1.0, 0.0, 1.0], size=shape)
    return signs * np.ldexp(1.0, exponents)


class TestDot:

    @staticmethod
    def test_dot_counts_operations():
        tally = OpTally()
        assert dot([1.0, 2.0, 3.0], [4.0, 5.0, 6.0], tally=tally) == 32.0
        assert tally["mul"] == 3
        assert tally["add"] == 2

    @staticmethod
    def test_dot_rounds_once():
        assert dot([0.1, 0.2], [1.0, 1.0], out_fmt=FixedFormat(6, 6)) == 0.296875

    @staticmethod
    def test_dot_length_mismatch():
        with pytest.raises(ShapeMismatch):
            dot([1.0, 2.0], [1.0])

    @staticmethod
    def test_shift_dot_matches_dot():
        w = RngStreams(1).stream("w").normal(size=64)
        x = pot_values(64, seed=1)
        tally = OpTally()
        assert shift_dot(w, x, tally=tally) == dot(w, x)
        assert tally["shift"] == int(np.count_nonzero(x))
        assert tally["mul"] == 0
        assert tally["add"] == 63

    @staticmethod
    def test_shift_dot_rejects_non_pot():
        with pytest.raises(FormatError):
            shift_dot([1.0, 2.0], [0.5, 0.75])

    @staticmethod
    def test_accumulates_left_to_right():
        acc = Accumulator()
        assert acc.accumulate(np.array([1e16, 1.0, -1e16])) == 0.0
        assert acc.accumulate(np.array([2.5])) == 2.5


class TestQTensor:

    @staticmethod
    def test_check_names_offending_element():
        t = QTensor([0.5, 0.3], FixedFormat(6, 6))
        with pytest.raises(FormatError) as e:
            t.check()
        assert "Element 1" in str(e.value)
        assert "fixed[6,6]" in str(e.value)

    @staticmethod
    def test_quantize_tensor_is_conformant():
        x = RngStreams(3).stream("x").normal(size=(4, 5))
        t = quantize_tensor(x, FloatFormat(5, 6), RoundingMode.STOCHASTIC, RngStreams(3).stream("q"))
        assert t.check() is t
        assert t.shape == (4, 5)
        assert np.all(np.isin(t.data, enumerate_codepoints(FloatFormat(5, 6))))

    @staticmethod
    def test_context_tensor():
        ctx = Context("fc1/weights", -6, 4)
        t = quantize_tensor(np.full(4, 0.011), ContextFormat(FixedFormat(6, 6), ctx))
        assert t.context == ctx
        assert np.all(t.representable())

    @staticmethod
    def test_dump_and_load(tmp_path):
        path = os.path.join(str(tmp_path), "tensors", "conv1")
        t = quantize_tensor(np.arange(6.0).reshape(2, 3) / 7, FixedFormat(0, 12), scale=GlobalScale(2))
        t.dump(path)
        with open(f"{path}.json") as f:
            sidecar = json.load(f)
        assert sidecar == {"shape": [2, 3], "fmt": "fixed[0,12]*2^2", "context": None, "scale_exponent": None}
        assert os.path.getsize(f"{path}.bin") == 6 * 8
        loaded = QTensor.load(path)
        assert np.array_equal(loaded.data, t.data)
        assert loaded.fmt == FixedFormat(0, 12)
        assert loaded.scale == GlobalScale(2)

    @staticmethod
    def test_dump_and_load_context(tmp_path):
        path = os.path.join(str(tmp_path), "fc1")
        ctx = Context("fc1/weights", -4, 3)
        t = quantize_tensor(np.array([0.01, -0.02, 0.0]), ContextFormat(context_float_base(4, 7), ctx))
        t.dump(path)
        loaded = QTensor.load(path)
        assert loaded.context.scale_exponent == -4
        assert loaded.context.id == "fc1/weights"
        assert np.array_equal(loaded.data, t.data)

    @staticmethod
    def test_load_shape_mismatch(tmp_path):
        path = os.path.join(str(tmp_path), "bad")
        QTensor(np.zeros(4)).dump(path)
        with open(f"{path}.json", "w") as f:
            json.dump({"shape": [5], "fmt": "wide", "context": None, "scale_exponent": None}, f)
        with pytest.raises(ShapeMismatch):
            QTensor.load(path)


class TestElementwise:

    @staticmethod
    def test_broadcast_add():
        tally = OpTally()
        out = elementwise("add", np.ones((2, 3)), np.array([0.25, 0.5, 0.75]), FixedFormat(6, 6), tally=tally)
        assert out.data.tolist() == [[1.25, 1.5, 1.75], [1.25, 1.5, 1.75]]
        assert tally["add"] == 6

    @staticmethod
    def test_max_counts_compares():
        tally = OpTally()
        out = elementwise("max", np.array([-1.0, 2.0]), np.zeros(2), tally=tally)
        assert out.data.tolist() == [0.0, 2.0]
        assert tally["cmp"] == 2

    @staticmethod
    def test_shape_mismatch():
        with pytest.raises(ShapeMismatch):
            elementwise("mul", np.ones((2, 3)), np.ones((4,)))

    @staticmethod
    def test_unknown_op():
        with pytest.raises(ValueError):
            elementwise("div", np.ones(2), np.ones(2))


class TestMatmul:

    @staticmethod
    def test_kernels_agree():
        a = RngStreams(4).stream("a").normal(size=(3, 7))
        b = pot_values((7, 5), seed=4)
        multiply = matmul(a, b, Kernel.MULTIPLY)
        shift = matmul(a, b, Kernel.SHIFT, pot_operand="b")
        assert np.array_equal(multiply, shift)
        assert np.allclose(matmul(a, b, Kernel.BLAS), multiply)

    @staticmethod
    def test_pot_left_operand():
        a = pot_values((4, 6), seed=5)
        b = RngStreams(5).stream("b").normal(size=(6, 2))
        assert np.array_equal(matmul(a, b, Kernel.SHIFT, pot_operand="a"), matmul(a, b, Kernel.MULTIPLY))

    @staticmethod
    def test_multiply_matches_dot():
        a = RngStreams(6).stream("a").normal(size=(2, 9))
        b = RngStreams(6).stream("b").normal(size=(9, 3))
        out = matmul(a, b, Kernel.MULTIPLY)
        assert out[1, 2] == dot(a[1], b[:, 2])

    @staticmethod
    def test_tallies():
        tally = OpTally()
        matmul(np.ones((3, 4)), np.ones((4, 5)), Kernel.MULTIPLY, tally)
        assert tally["mul"] == 60
        assert tally["add"] == 45
        b = np.ones((4, 5))
        b[0, :] = 0.0
        shifts = OpTally()
        matmul(np.ones((3, 4)), b, Kernel.SHIFT, shifts, pot_operand="b")
        assert shifts["shift"] == 15 * 3
        assert shifts["mul"] == 0

    @staticmethod
    def test_multiply_matches_scalar_loop():
        a = RngStreams(8).stream("a").normal(size=(3, 40)) * 1e8
        b = RngStreams(8).stream("b").normal(size=(40, 2))
        expected = np.zeros((3, 2))
        for i in range(3):
            for j in range(2):
                total = 0.0
                for k in range(40):
                    total += float(a[i, k] * b[k, j])
                expected[i, j] = total
        assert np.array_equal(matmul(a, b, Kernel.MULTIPLY), expected)

    @staticmethod
    def test_blocking_keeps_order(monkeypatch):
        a = RngStreams(9).stream("a").normal(size=(2, 33)) * 1e6
        b = pot_values((33, 3), seed=9)
        whole = matmul(a, b, Kernel.SHIFT, pot_operand="b")
        monkeypatch.setattr("lpnum.common.qtensor.BLOCK_TERMS", 1)
        assert np.array_equal(matmul(a, b, Kernel.SHIFT, pot_operand="b"), whole)
        assert np.array_equal(matmul(a, b, Kernel.MULTIPLY), whole)

    @staticmethod
    def test_blas_tallies_shifts_for_pot_operand():
        a = pot_values((4, 6), seed=10)
        a[0, :] = 0.0
        b = RngStreams(10).stream("b").normal(size=(6, 2))
        tally = OpTally()
        matmul(a, b, Kernel.BLAS, tally, pot_operand="a")
        assert tally["mul"] == 0
        assert tally["shift"] == int(np.count_nonzero(a)) * 2

    @staticmethod
    def test_shift_needs_pot_operand():
        with pytest.raises(ValueError):
            matmul(np.ones((3, 4)), np.ones((4, 5)), Kernel.SHIFT)

    @staticmethod
    def test_shape_mismatch():
        with pytest.raises(ShapeMismatch):
            matmul(np.ones((3, 4)), np.ones((3, 4)))

    @staticmethod
    def test_pot_decompose():
        negative, exponent, zero = pot_decompose(np.array([-0.25, 0.0, 8.0]))
        assert negative.tolist() == [True, False, False]
        assert zero.tolist() == [False, True, False]
        assert exponent[[0, 2]].tolist() == [-2, 3]
