"""Buffered per-step loss log written as CSV.

Rows accumulate in memory and are appended to the file every `flush_every`
rows and on close. The buffer is only cleared after a successful write, so a
failed flush keeps its rows for the next attempt.
"""

import csv
import logging
import math
import threading
from pathlib import Path

logger = logging.getLogger("pcavs.metrics_log")

COLUMNS = ("step", "stage", "L_GAN_g", "L_GAN_d", "L_L1", "L_vgg", "L_c", "L_i", "L_total", "wall_ms")


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value) if math.isfinite(value) else str(value)
    return str(value)


class MetricsLog:
    def __init__(self, path: str | Path, flush_every: int = 50):
        self.path = Path(path)
        self.flush_every = max(1, flush_every)
        self._rows: list[dict] = []
        self._lock = threading.Lock()

    def record(self, step: int, stage: str, **values) -> None:
        unknown = set(values) - set(COLUMNS)
        if unknown:
            raise KeyError(f"unknown metrics columns: {sorted(unknown)}")
        row = {"step": step, "stage": stage, **values}
        with self._lock:
            self._rows.append(row)
            due = len(self._rows) >= self.flush_every
        if due:
            self.flush()

    def flush(self) -> int:
        """Append buffered rows; returns how many were written."""
        with self._lock:
            if not self._rows:
                return 0
            snapshot = list(self._rows)
            new_file = not self.path.exists() or self.path.stat().st_size == 0
            try:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with open(self.path, "a", newline="", encoding="utf-8") as fh:
                    writer = csv.writer(fh)
                    if new_file:
                        writer.writerow(COLUMNS)
                    for row in snapshot:
                        writer.writerow([_cell(row.get(col)) for col in COLUMNS])
            except OSError:
                logger.exception(f"metrics flush failed path={self.path}; keeping {len(snapshot)} rows")
                return 0
            del self._rows[:len(snapshot)]
        return len(snapshot)

    def close(self) -> None:
        self.flush()

    def __enter__(self) -> "MetricsLog":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def read_metrics(path: str | Path) -> list[dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))
