"""Append-only metrics sink writing the same rows to CSV and JSON."""

from __future__ import annotations

import csv
import json
import os
from dataclasses import asdict, dataclass

__all__ = ["MetricsRow", "MetricsSink", "COLUMNS", "read_csv", "read_json"]

COLUMNS = ("run_id", "epoch", "step", "metric", "group", "value")


@dataclass
class MetricsRow:
    run_id: str
    epoch: int
    step: int
    metric: str
    group: str
    value: float


class MetricsSink:
    """Buffers rows and flushes them to ``metrics.csv`` (appended) and
    ``metrics.json`` (rewritten) under ``out_dir``."""

    def __init__(self, out_dir, run_id: str):
        self.out_dir = str(out_dir)
        self.run_id = run_id
        self.rows: list[MetricsRow] = []
        self._pending: list[MetricsRow] = []
        os.makedirs(self.out_dir, exist_ok=True)
        self.csv_path = os.path.join(self.out_dir, "metrics.csv")
        self.json_path = os.path.join(self.out_dir, "metrics.json")
        with open(self.csv_path, "w", newline="", encoding="utf-8") as fh:
            csv.writer(fh).writerow(COLUMNS)

    def add(self, metric: str, value, epoch: int = -1, step: int = -1, group: str = "") -> None:
        row = MetricsRow(self.run_id, int(epoch), int(step), metric, str(group), float(value))
        self.rows.append(row)
        self._pending.append(row)

    def add_many(self, values: dict, epoch: int = -1, step: int = -1, group: str = "") -> None:
        for k, v in values.items():
            self.add(k, v, epoch, step, group)

    def flush(self) -> None:
        with open(self.csv_path, "a", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            for r in self._pending:
                w.writerow([r.run_id, r.epoch, r.step, r.metric, r.group, repr(r.value)])
        self._pending = []
        tmp = self.json_path + ".tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump([asdict(r) for r in self.rows], fh)
        os.replace(tmp, self.json_path)


def read_csv(path) -> list[MetricsRow]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != COLUMNS:
            raise ValueError(f"{path}: unexpected header {header}")
        return [MetricsRow(r[0], int(r[1]), int(r[2]), r[3], r[4], float(r[5])) for r in reader]


def read_json(path) -> list[MetricsRow]:
    with open(path, encoding="utf-8") as fh:
        return [MetricsRow(**d) for d in json.load(fh)]
