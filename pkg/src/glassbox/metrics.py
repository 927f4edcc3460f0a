"""Append-only training metrics ledger (JSONL) with CSV export."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, asdict
from pathlib import Path


class MetricsError(Exception):
    pass


CSV_FIELDS = ["step", "chunk_index", "loss", "grad_norm_preclip", "lr", "tokens_per_second", "wall_time"]


@dataclass
class MetricsRecord:
    step: int
    chunk_index: int
    loss: float
    grad_norm_preclip: float
    lr: float
    tokens_per_second: float
    wall_time: float


class MetricsLedger:
    """One JSONL file per run; steps must be strictly increasing."""

    def __init__(self, path: Path):
        self.path = Path(path)
        self._last_step = -1
        if self.path.exists():
            for rec in self.query():
                self._last_step = rec.step
        self._fh = open(self.path, "a", encoding="utf-8")

    def append(self, record: MetricsRecord) -> None:
        if record.step <= self._last_step:
            raise MetricsError(
                f"nonmonotonic step append: {record.step} after {self._last_step}"
            )
        self._fh.write(json.dumps(asdict(record), sort_keys=True) + "\n")
        self._fh.flush()
        self._last_step = record.step

    def query(self, start: int | None = None, end: int | None = None) -> list[MetricsRecord]:
        """Records with start <= step < end, in step order."""
        records = []
        if not self.path.exists():
            return records
        with open(self.path, encoding="utf-8") as f:
            for line in f:
                line = line.strip()
                if not line:
                    continue
                rec = MetricsRecord(**json.loads(line))
                if start is not None and rec.step < start:
                    continue
                if end is not None and rec.step >= end:
                    continue
                records.append(rec)
        return records

    def export_csv(self, csv_path: Path) -> int:
        """Write all records as CSV; returns the row count. Deterministic
        given the same ledger contents."""
        records = self.query()
        with open(csv_path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(CSV_FIELDS)
            for rec in records:
                d = asdict(rec)
                writer.writerow([repr(d[k]) if isinstance(d[k], float) else d[k] for k in CSV_FIELDS])
        return len(records)

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
