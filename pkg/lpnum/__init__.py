from lpnum.common import errors
from lpnum.common import models
from lpnum.common.config import ExperimentConfig, TrainConfig
from lpnum.common.network import NetworkState, SchemeConfig, build_topology
from lpnum.common.qformats import RoundingMode, parse_format
from lpnum.common.reader import Reader
from lpnum.common.runner import Runner

LPNUM_VERSION = "0.1.0"
__all__ = ["ExperimentConfig", "NetworkState", "Reader", "RoundingMode", "Runner", "SchemeConfig", "TrainConfig",
           "build_topology", "errors", "models", "parse_format", "LPNUM_VERSION"]
