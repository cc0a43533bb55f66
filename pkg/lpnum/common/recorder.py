import csv
import json
import logging
import os
from typing import Dict, List

from lpnum.common.config import ExperimentConfig, write_config_file
from lpnum.common.models import EpochMetrics, RunSummary
from lpnum.common.util import RunNameFilter

logger = logging.getLogger("rich")

METRICS_FILE = "metrics.jsonl"
HISTOGRAMS_FILE = "histograms.jsonl"
SUMMARY_FILE = "summary.csv"
CONFIG_FILE = "config.yaml"
LOG_FILE = "run.log"
SUMMARY_FIELDS = ["name", "scheme", "rounding", "seed", "final_accuracy", "epochs_to_70"]


def _json_line(obj: Dict) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")) + "\n"


class Recorder:
    """
    Writes the artifacts of one run directory. Nothing but `run.log` carries timestamps, so two
    runs with the same configuration and seed produce byte-identical metrics files.
    """

    def __init__(self, run_dir: str, run_name: str = None, append: bool = False):
        self.run_dir = run_dir
        self.run_name = run_name or os.path.basename(os.path.normpath(run_dir))
        os.makedirs(run_dir, exist_ok=True)
        if not append:
            for name in METRICS_FILE, HISTOGRAMS_FILE:
                path = os.path.join(run_dir, name)
                if os.path.exists(path):
                    os.remove(path)
        self._handler = None
        self._filter = None

    def attach_log(self) -> None:
        self._handler = logging.FileHandler(os.path.join(self.run_dir, LOG_FILE))
        self._handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
        self._filter = RunNameFilter(self.run_name)
        logger.addHandler(self._handler)
        logger.addFilter(self._filter)

    def detach_log(self) -> None:
        if self._handler is not None:
            logger.removeHandler(self._handler)
            self._handler.close()
            self._handler = None
        if self._filter is not None:
            logger.removeFilter(self._filter)
            self._filter = None

    def write_config(self, config: ExperimentConfig) -> None:
        write_config_file(config, os.path.join(self.run_dir, CONFIG_FILE))

    def write_epoch(self, metrics: EpochMetrics) -> None:
        with open(os.path.join(self.run_dir, METRICS_FILE), "a") as f:
            f.write(_json_line(metrics.as_dict()))

    def write_histograms(self, epoch: int, histograms: Dict[str, Dict[str, Dict[str, int]]]) -> None:
        with open(os.path.join(self.run_dir, HISTOGRAMS_FILE), "a") as f:
            f.write(_json_line({"epoch": epoch, "layers": histograms}))

    def write_summary(self, summary: RunSummary) -> None:
        write_summary_csv([summary], os.path.join(self.run_dir, SUMMARY_FILE))


def write_summary_csv(summaries: List[RunSummary], path: str) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=SUMMARY_FIELDS, lineterminator="\n")
        writer.writeheader()
        for s in summaries:
            row = s.as_dict()
            row["epochs_to_70"] = "" if row["epochs_to_70"] is None else row["epochs_to_70"]
            writer.writerow(row)
