import math
from typing import Dict, List, Optional

OP_KINDS = ("mul", "add", "shift", "cmp", "scale_adjust")


class OpTally:
    """
    Mergeable per-op counter. Counts are Python ints so full-training totals stay exact.
    """

    def __init__(self, **counts: int):
        self.counts: Dict[str, int] = {kind: 0 for kind in OP_KINDS}
        for kind, count in counts.items():
            self.record(kind, count)

    def record(self, kind: str, count: int = 1) -> None:
        if kind not in self.counts:
            raise KeyError(f"Unknown op kind '{kind}'")
        self.counts[kind] += int(count)

    def merge(self, other: "OpTally") -> "OpTally":
        for kind, count in other.counts.items():
            self.counts[kind] += count
        return self

    def scaled(self, factor: int) -> "OpTally":
        return OpTally(**{k: v * int(factor) for k, v in self.counts.items()})

    def __getitem__(self, kind: str) -> int:
        return self.counts[kind]

    def __eq__(self, other) -> bool:
        return isinstance(other, OpTally) and self.counts == other.counts

    def __repr__(self) -> str:
        return f"OpTally({', '.join(f'{k}={v}' for k, v in self.counts.items())})"

    def as_dict(self) -> Dict[str, int]:
        return dict(self.counts)


class EpochMetrics:
    epoch: int
    train_loss: Optional[float]
    test_accuracy: float
    contexts: Dict[str, int]
    ops: Dict[str, int]
    mean_update: Dict[str, float]

    def __init__(self, epoch: int, train_loss: Optional[float], test_accuracy: float, contexts: Dict[str, int] = None,
                 ops: Dict[str, int] = None, mean_update: Dict[str, float] = None):
        if not 0.0 <= test_accuracy <= 100.0:
            raise ValueError(f"Accuracy must lie in [0, 100], got {test_accuracy}")
        self.epoch = epoch
        self.train_loss = train_loss
        self.test_accuracy = test_accuracy
        self.contexts = contexts or {}
        self.ops = ops or {}
        self.mean_update = mean_update or {}

    def as_dict(self) -> Dict:
        return {
            "epoch": self.epoch,
            "train_loss": self.train_loss,
            "test_accuracy": self.test_accuracy,
            "contexts": self.contexts,
            "ops": self.ops,
            "mean_update": self.mean_update,
        }

    @classmethod
    def from_dict(cls, d: Dict) -> "EpochMetrics":
        return cls(epoch=int(d["epoch"]), train_loss=None if d.get("train_loss") is None else float(d["train_loss"]),
                   test_accuracy=float(d["test_accuracy"]), contexts=d.get("contexts"), ops=d.get("ops"),
                   mean_update=d.get("mean_update"))


def epochs_to_threshold(metrics: List[EpochMetrics], threshold: float = 70.0) -> Optional[int]:
    for m in metrics:
        if m.test_accuracy >= threshold:
            return m.epoch
    return None


class RunSummary:
    name: str
    scheme: str
    rounding: str
    seed: int
    final_accuracy: float
    epochs_to_70: Optional[int]

    def __init__(self, name: str, scheme: str, rounding: str, seed: int, final_accuracy: float,
                 epochs_to_70: Optional[int] = None):
        self.name = name
        self.scheme = scheme
        self.rounding = rounding
        self.seed = seed
        self.final_accuracy = final_accuracy
        self.epochs_to_70 = epochs_to_70

    def as_dict(self) -> Dict:
        return {
            "name": self.name,
            "scheme": self.scheme,
            "rounding": self.rounding,
            "seed": self.seed,
            "final_accuracy": self.final_accuracy,
            "epochs_to_70": self.epochs_to_70,
        }

    @classmethod
    def from_dict(cls, d: Dict) -> "RunSummary":
        e70 = d.get("epochs_to_70")
        return cls(name=d["name"], scheme=d["scheme"], rounding=d["rounding"], seed=int(d["seed"]),
                   final_accuracy=float(d["final_accuracy"]),
                   epochs_to_70=None if e70 in (None, "") else int(e70))


class ConformanceResult:
    name: str
    passed: bool
    detail: str
    seed: int
    seconds: float

    def __init__(self, name: str, passed: bool, detail: str = "", seed: int = 0, seconds: float = math.nan):
        self.name = name
        self.passed = passed
        self.detail = detail
        self.seed = seed
        self.seconds = seconds

    def as_dict(self) -> Dict:
        return {
            "name": self.name,
            "passed": self.passed,
            "detail": self.detail,
            "seed": self.seed,
            "seconds": round(self.seconds, 3),
        }

    def as_markdown_table_row(self) -> str:
        cells = [self.name, "pass" if self.passed else "FAIL", f"{self.seconds:.2f}", str(self.seed), self.detail]
        return "| " + "|".join(cells) + " |"
