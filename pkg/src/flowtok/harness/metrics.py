"""Append-only metric stream persisted as CSV rows (step,split,metric,value)."""

from __future__ import annotations

import csv
from pathlib import Path

HEADER_COMMENT = "# flowtok-metrics-v1"
COLUMNS = ("step", "split", "metric", "value")


class MetricsLogger:
    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        new = not self.path.exists()
        self._fh = open(self.path, "a", newline="")
        self._writer = csv.writer(self._fh)
        if new:
            self._fh.write(HEADER_COMMENT + "\n")
            self._writer.writerow(COLUMNS)
            self._fh.flush()

    def log(self, step: int, split: str, metric: str, value: float):
        self._writer.writerow([step, split, metric, repr(float(value))])

    def close(self):
        self._fh.flush()
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_metrics(path) -> list[tuple[int, str, str, float]]:
    rows = []
    with open(path, newline="") as f:
        lines = [ln for ln in f if not ln.startswith("#")]
    for row in csv.reader(lines):
        if not row or row[0] == "step":
            continue
        rows.append((int(row[0]), row[1], row[2], float(row[3])))
    return rows
