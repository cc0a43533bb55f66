import csv
import io
import json
import logging
import os
from typing import Dict, List, Optional, Tuple

from lpnum.common.config import load_config_file
from lpnum.common.errors import LpnumError
from lpnum.common.models import EpochMetrics, RunSummary, epochs_to_threshold
from lpnum.common.recorder import CONFIG_FILE, METRICS_FILE
from lpnum.common.util import mean_and_stddev

logger = logging.getLogger("rich")


class RunRecord:
    def __init__(self, run_dir: str, config: Dict, metrics: List[EpochMetrics]):
        self.run_dir = run_dir
        self.config = config
        self.metrics = metrics

    @property
    def summary(self) -> RunSummary:
        final = self.metrics[-1].test_accuracy if self.metrics else float("nan")
        return RunSummary(
            name=self.config.get("name") or os.path.basename(os.path.normpath(self.run_dir)),
            scheme=self.config.get("scheme", "unknown"),
            rounding=self.config.get("rounding", "unknown"),
            seed=int(self.config.get("seed", 0)),
            final_accuracy=final,
            epochs_to_70=epochs_to_threshold(self.metrics),
        )


def read_metrics(path: str) -> List[EpochMetrics]:
    metrics = []
    with open(path, "r") as f:
        for line in f:
            if line.strip():
                metrics.append(EpochMetrics.from_dict(json.loads(line)))
    return metrics


class Reader:
    """
    Loads run directories written by the recorder and aggregates them into result tables.
    """

    def load_run(self, run_dir: str) -> RunRecord:
        metrics_path = os.path.join(run_dir, METRICS_FILE)
        if not os.path.isfile(metrics_path):
            raise LpnumError(f"{run_dir} has no {METRICS_FILE}")
        config_path = os.path.join(run_dir, CONFIG_FILE)
        config = load_config_file(config_path) if os.path.isfile(config_path) else {}
        return RunRecord(run_dir, config, read_metrics(metrics_path))

    def find_runs(self, root: str) -> List[str]:
        found = []
        for current, _, files in os.walk(root):
            if METRICS_FILE in files:
                found.append(current)
        return sorted(found)

    def load_all(self, roots: List[str]) -> List[RunRecord]:
        runs = []
        for root in roots:
            for run_dir in self.find_runs(root):
                runs.append(self.load_run(run_dir))
        if not runs:
            raise LpnumError(f"No runs found under {', '.join(roots)}")
        logger.debug("Loaded %d runs", len(runs))
        return runs

    @staticmethod
    def group(runs: List[RunRecord]) -> Dict[Tuple[str, str], List[RunSummary]]:
        groups: Dict[Tuple[str, str], List[RunSummary]] = {}
        for run in runs:
            s = run.summary
            groups.setdefault((s.scheme, s.rounding), []).append(s)
        return dict(sorted(groups.items()))

    def aggregate(self, runs: List[RunRecord]) -> List[Dict]:
        rows = []
        for (scheme, rounding), summaries in self.group(runs).items():
            acc_mean, acc_std = mean_and_stddev([s.final_accuracy for s in summaries])
            reached = [s.epochs_to_70 for s in summaries if s.epochs_to_70 is not None]
            e70_mean, e70_std = mean_and_stddev([float(e) for e in reached])
            rows.append({
                "scheme": scheme,
                "rounding": rounding,
                "runs": len(summaries),
                "accuracy_mean": acc_mean,
                "accuracy_stddev": acc_std,
                "epochs_to_70_mean": e70_mean if reached else None,
                "epochs_to_70_stddev": e70_std if reached else None,
                "reached_70": len(reached),
            })
        return rows


def _fmt(value: Optional[float], digits: int = 2) -> str:
    return "-" if value is None else f"{value:.{digits}f}"


def aggregate_as_markdown_table(rows: List[Dict]) -> str:
    lines = ["| Scheme | Rounding | Runs | Accuracy | Epochs to >= 70% |", "|---|---|---|---|---|"]
    for r in rows:
        e70 = "-" if r["epochs_to_70_mean"] is None else \
            f"{_fmt(r['epochs_to_70_mean'], 1)} ± {_fmt(r['epochs_to_70_stddev'], 1)} ({r['reached_70']}/{r['runs']})"
        lines.append(f"| {r['scheme']} | {r['rounding']} | {r['runs']} | "
                     f"{_fmt(r['accuracy_mean'])}% ± {_fmt(r['accuracy_stddev'])} | {e70} |")
    return "\n".join(lines)


def rows_as_csv(rows: List[Dict]) -> str:
    if not rows:
        return ""
    buffer = io.StringIO()
    writer = csv.DictWriter(buffer, fieldnames=list(rows[0].keys()), lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: "" if v is None else v for k, v in r.items()})
    return buffer.getvalue()
