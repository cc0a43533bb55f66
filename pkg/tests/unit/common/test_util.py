import logging
import math

import numpy as np
import pytest
from _pytest.logging import LogCaptureFixture

from lpnum.common.errors import FormatError
from lpnum.common.util import (ZERO_BIN, RngStreams, RunNameFilter, log2_histogram, mean_and_stddev,
                               parse_2d_separated_string, parse_int_list)


class TestUtil:

    @staticmethod
    @pytest.mark.parametrize("_str, delimiter_1, delimiter_2, expected",
                             [
                                 ("1=a,2=b,3=c", ",", "=", {"1": "a", "2": "b", "3": "c"}),
                                 ("1 = a,2 = b", ",", "=", {"1": "a", "2": "b"}),
                                 ("weights=fixed[0,14],outputs=float[5,6]", ",", "=",
                                  {"weights": "fixed[0,14]", "outputs": "float[5,6]"}),
                                 ("weights=float[5,6,bias=3]", ",", "=", {"weights": "float[5,6,bias=3]"}),
                                 (None, ",", "=", None)
                             ])
    def test_parse_2d_separated_string(_str, delimiter_1, delimiter_2, expected):
        actual = parse_2d_separated_string(_str, delimiter_1, delimiter_2)
        assert expected == actual

    @staticmethod
    @pytest.mark.parametrize("_str, entry", [("weights", "'weights'"), ("weights=fixed[0,12],outputs", "'outputs'")])
    def test_parse_2d_separated_string_rejects_entries_without_value(_str, entry):
        with pytest.raises(FormatError) as e:
            parse_2d_separated_string(_str)
        assert entry in str(e.value)

    @staticmethod
    @pytest.mark.parametrize("_str, expected",
                             [
                                 ("1,2,3", [1, 2, 3]),
                                 (" 4 , 5 ,", [4, 5]),
                                 ("", []),
                                 (None, []),
                             ])
    def test_parse_int_list(_str, expected):
        assert parse_int_list(_str) == expected

    @staticmethod
    def test_parse_int_list_rejects_garbage():
        with pytest.raises(ValueError):
            parse_int_list("1,two")

    @staticmethod
    def test_mean_and_stddev():
        mean, std = mean_and_stddev([1.0, 2.0, 3.0])
        assert mean == 2.0
        assert std == 1.0
        assert mean_and_stddev([5.0]) == (5.0, 0.0)
        assert all(math.isnan(v) for v in mean_and_stddev([]))


class TestRngStreams:

    @staticmethod
    def test_same_key_same_stream():
        a = RngStreams(7).stream("quantize", 1, 2, "conv1/outputs").random(5)
        b = RngStreams(7).stream("quantize", 1, 2, "conv1/outputs").random(5)
        assert np.array_equal(a, b)

    @staticmethod
    def test_order_independence():
        streams = RngStreams(7)
        first = streams.stream("a").random(3)
        streams.stream("b").random(100)
        assert np.array_equal(streams.stream("a").random(3), first)

    @staticmethod
    def test_different_keys_differ():
        streams = RngStreams(7)
        assert not np.array_equal(streams.stream("a", 0).random(8), streams.stream("a", 1).random(8))
        assert not np.array_equal(streams.stream("a").random(8), RngStreams(8).stream("a").random(8))

    @staticmethod
    def test_child_is_deterministic():
        assert RngStreams(3).child("run", 1).seed == RngStreams(3).child("run", 1).seed


class TestHistogram:

    @staticmethod
    def test_bins():
        histogram = log2_histogram(np.array([0.0, 0.0, 1.0, 1.5, -0.25, 3.0]))
        assert histogram == {ZERO_BIN: 2, "0": 2, "-2": 1, "1": 1}

    @staticmethod
    def test_counts_sum_to_size():
        values = RngStreams(0).stream("h").normal(size=(5, 7))
        assert sum(log2_histogram(values).values()) == 35

    @staticmethod
    def test_empty():
        assert log2_histogram(np.array([])) == {}


class TestRunNameFilter:

    @staticmethod
    def test_prefixes_messages(caplog: LogCaptureFixture):
        logger = logging.getLogger("lpnum_test_logger")
        logger.setLevel(logging.DEBUG)
        run_filter = RunNameFilter("brave-otter")
        logger.addFilter(run_filter)
        try:
            with caplog.at_level(logging.INFO, logger="lpnum_test_logger"):
                logger.info("Epoch %d finished", 3)
        finally:
            logger.removeFilter(run_filter)
        assert "[brave-otter] Epoch 3 finished" in caplog.text
