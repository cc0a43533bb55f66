import logging
import math
import zlib
from typing import Dict, Hashable, List, Tuple, Union

import numpy as np

from lpnum.common.errors import FormatError

logger = logging.getLogger("rich")

# Histogram bin used for exact zeros (log2 is undefined there).
ZERO_BIN = "zero"


def parse_2d_separated_string(_str: Union[str, None], delimiter_1: str = ",", delimiter_2: str = "="):
    if not _str:
        return None
    parsed: Dict = {}
    # Format literals carry their own commas ("fixed[0,12]"), so only split outside brackets.
    depth = 0
    current = ""
    mappings = []
    for char in _str:
        if char == "[":
            depth += 1
        elif char == "]":
            depth -= 1
        if char == delimiter_1 and depth == 0:
            mappings.append(current)
            current = ""
        else:
            current += char
    mappings.append(current)
    for mapping in mappings:
        if delimiter_2 not in mapping:
            raise FormatError(f"'{mapping.strip()}' is not a {delimiter_2}-separated pair")
        [k, v] = mapping.split(delimiter_2, 1)
        parsed[k.strip()] = v.strip()
    return parsed


def parse_int_list(_str: Union[str, None], delimiter: str = ",") -> List[int]:
    if not _str:
        return []
    return [int(part.strip()) for part in _str.split(delimiter) if part.strip()]


def _key_part(part: Hashable) -> int:
    if isinstance(part, (int, np.integer)) and part >= 0:
        return int(part)
    return zlib.crc32(str(part).encode("utf-8"))


class RngStreams:
    """
    Splittable source of counter-based (Philox) random streams.

    A stream is addressed by a key path such as ("quantize", epoch, iteration, "conv1/outputs");
    the same seed and key always yield the same stream, independently of the order in which
    streams are requested.
    """

    def __init__(self, seed: int = 0):
        self.seed = int(seed)

    def stream(self, *key: Hashable) -> np.random.Generator:
        sequence = np.random.SeedSequence(entropy=self.seed, spawn_key=tuple(_key_part(p) for p in key))
        return np.random.Generator(np.random.Philox(sequence))

    def child(self, *key: Hashable) -> "RngStreams":
        derived = self.stream(*key).integers(0, 2 ** 63 - 1)
        return RngStreams(seed=int(derived))


def log2_histogram(values: np.ndarray) -> Dict[str, int]:
    """
    Counts values per integer log2-magnitude bin (floor(log2|x|)); exact zeros get their own bin.
    Bin counts always sum to the number of elements.
    """
    flat = np.asarray(values, dtype=np.float64).ravel()
    zeros = int(np.count_nonzero(flat == 0.0))
    nonzero = np.abs(flat[flat != 0.0])
    histogram: Dict[str, int] = {}
    if zeros:
        histogram[ZERO_BIN] = zeros
    if nonzero.size:
        _, exponents = np.frexp(nonzero)
        bins, counts = np.unique(exponents - 1, return_counts=True)
        for b, c in zip(bins.tolist(), counts.tolist()):
            histogram[str(b)] = int(c)
    return histogram


def mean_and_stddev(values: List[float]) -> Tuple[float, float]:
    if not values:
        return math.nan, math.nan
    mean = sum(values) / len(values)
    if len(values) < 2:
        return mean, 0.0
    variance = sum((v - mean) ** 2 for v in values) / (len(values) - 1)
    return mean, math.sqrt(variance)


class RunNameFilter(logging.Filter):
    def __init__(self, run_name: str):
        super().__init__()
        self.run_name = run_name

    def filter(self, record: logging.LogRecord) -> bool:
        prefix = f"[{self.run_name}] "
        try:
            if not str(record.msg).startswith(prefix):
                record.msg = prefix + str(record.msg)
        except:
            pass
        return True
