import os
from typing import Dict, List, Optional

from ruamel.yaml import YAML
from unique_names_generator import get_random_name
from unique_names_generator.data import ADJECTIVES, ANIMALS

from lpnum.common.errors import InvalidScheme
from lpnum.common.qformats import RoundingMode
from lpnum.common.util import parse_2d_separated_string

yaml = YAML(typ="safe")
yaml.default_flow_style = False

DATA_DIR_ENV = "LPNUM_DATA_DIR"


class TrainConfig:

    def __init__(self, learning_rate: float = 0.001, momentum: float = 0.9, weight_decay: float = 0.004,
                 batch_size: int = 100, epochs: int = 40, pot_hyperparameters: bool = False,
                 checkpoint_every: int = 0):
        if learning_rate <= 0:
            raise ValueError("The learning rate must be positive")
        if momentum < 0 or weight_decay < 0:
            raise ValueError("Momentum and weight decay must be non-negative")
        if batch_size <= 0 or epochs < 0:
            raise ValueError("The batch size must be positive and the epoch count non-negative")
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.epochs = epochs
        self.pot_hyperparameters = pot_hyperparameters
        self.checkpoint_every = checkpoint_every

    def as_dict(self) -> Dict:
        return {
            "learning_rate": self.learning_rate,
            "momentum": self.momentum,
            "weight_decay": self.weight_decay,
            "batch_size": self.batch_size,
            "epochs": self.epochs,
            "pot_hyperparameters": self.pot_hyperparameters,
            "checkpoint_every": self.checkpoint_every,
        }


class ExperimentConfig:
    """
    Everything a `run` needs; keys mirror the CLI flags one to one.
    """

    def __init__(self, scheme: str = "float12", rounding: str = "stochastic", overrides: Dict[str, str] = None,
                 data_dir: str = None, synthetic: bool = False, classes: int = 10, samples_per_class: int = 100,
                 image_size: int = 32, separation: float = 1.0, subset: int = 0, test_subset: int = 0,
                 mean_subtraction: bool = False, seed: int = 0, data_seed: int = 0, output_dir: str = "runs",
                 name: str = None, kernel: str = "exact", debug: bool = False, histograms: bool = False,
                 widths: List[int] = None, fc_width: int = 1000, resume: str = None, train: TrainConfig = None):
        from lpnum.common.network import SCHEMES

        if scheme not in SCHEMES:
            raise InvalidScheme(scheme, f"known schemes are {', '.join(SCHEMES)}")
        try:
            self.rounding = RoundingMode(rounding)
        except ValueError:
            raise InvalidScheme(scheme, f"'{rounding}' is not a rounding mode")
        if isinstance(overrides, str):
            overrides = parse_2d_separated_string(overrides)
        self.scheme = scheme
        self.overrides = overrides or {}
        self.data_dir = data_dir or os.environ.get(DATA_DIR_ENV)
        self.synthetic = synthetic
        self.classes = classes
        self.samples_per_class = samples_per_class
        self.image_size = image_size
        self.separation = separation
        self.subset = subset
        self.test_subset = test_subset
        self.mean_subtraction = mean_subtraction
        self.seed = seed
        self.data_seed = data_seed
        self.output_dir = output_dir
        self.name = name or get_random_name(combo=[ADJECTIVES, ANIMALS], separator="-", style="lowercase")
        self.kernel = kernel
        self.debug = debug
        self.histograms = histograms
        self.widths = list(widths) if widths else [32, 32, 64]
        self.fc_width = fc_width
        self.resume = resume
        self.train = train or TrainConfig()

    @property
    def run_dir(self) -> str:
        return os.path.join(self.output_dir, self.name)

    def scheme_config(self):
        from lpnum.common.network import SchemeConfig
        return SchemeConfig.from_name(self.scheme, self.overrides)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        d = self.as_dict()
        d["seed"] = seed
        d["name"] = f"{self.name}-s{seed}"
        return ExperimentConfig.from_dict(d)

    def as_dict(self) -> Dict:
        return {
            "scheme": self.scheme,
            "rounding": self.rounding.value,
            "overrides": dict(self.overrides),
            "data_dir": self.data_dir,
            "synthetic": self.synthetic,
            "classes": self.classes,
            "samples_per_class": self.samples_per_class,
            "image_size": self.image_size,
            "separation": self.separation,
            "subset": self.subset,
            "test_subset": self.test_subset,
            "mean_subtraction": self.mean_subtraction,
            "seed": self.seed,
            "data_seed": self.data_seed,
            "output_dir": self.output_dir,
            "name": self.name,
            "kernel": self.kernel,
            "debug": self.debug,
            "histograms": self.histograms,
            "widths": list(self.widths),
            "fc_width": self.fc_width,
            "resume": self.resume,
            **self.train.as_dict(),
        }

    @classmethod
    def from_dict(cls, d: Dict) -> "ExperimentConfig":
        d = dict(d)
        train_keys = TrainConfig().as_dict().keys()
        train = TrainConfig(**{k: d.pop(k) for k in list(d) if k in train_keys})
        known = set(cls().as_dict().keys()) - set(train_keys)
        unknown = sorted(set(d) - known)
        if unknown:
            raise InvalidScheme(d.get("scheme"), f"unknown configuration keys: {', '.join(unknown)}")
        return cls(train=train, **d)


def load_config_file(path: str) -> Dict:
    with open(path, "r") as f:
        loaded = yaml.load(f)
    if loaded is None:
        return {}
    if not isinstance(loaded, dict):
        raise InvalidScheme(reason=f"{path} must hold a mapping of run options")
    return dict(loaded)


def write_config_file(config: ExperimentConfig, path: str) -> None:
    with open(path, "w") as f:
        yaml.dump(config.as_dict(), f)


def resolve_experiment_config(file_values: Optional[Dict], flag_values: Dict) -> ExperimentConfig:
    """
    Merges config-file values with explicitly given flags; flags win.
    """
    merged = dict(file_values or {})
    merged.update({k: v for k, v in flag_values.items() if v is not None})
    return ExperimentConfig.from_dict(merged)
