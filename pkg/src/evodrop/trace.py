"""Training traces and run summaries."""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

TRACE_COLUMNS = ("step", "train_err", "train_loss", "test_err", "test_loss", "elapsed_ms")


@dataclass(frozen=True)
class TraceRow:
    step: int
    train_err: float
    train_loss: float
    test_err: float | None = None
    test_loss: float | None = None
    elapsed_ms: float | None = None


@dataclass
class TrainingTrace:
    """Evaluation records in strictly increasing step order.

    ``step`` counts SGD updates for shallow runs and epochs for deep runs.
    """

    rows: list = field(default_factory=list)

    def append(self, row):
        if self.rows and row.step <= self.rows[-1].step:
            raise ValueError(f"trace steps must increase: {row.step} after {self.rows[-1].step}")
        self.rows.append(row)

    def __len__(self):
        return len(self.rows)

    def __iter__(self):
        return iter(self.rows)

    def column(self, name):
        return np.array([np.nan if getattr(r, name) is None else getattr(r, name) for r in self.rows])

    @property
    def steps(self):
        return np.array([r.step for r in self.rows], dtype=np.int64)

    def first_step_reaching(self, name, target):
        """First recorded step whose ``name`` column is <= target, or None."""
        for r in self.rows:
            v = getattr(r, name)
            if v is not None and v <= target:
                return r.step
        return None

    def to_csv(self, path_or_file, timing=False):
        """Write the trace; ``elapsed_ms`` is left blank unless ``timing`` is set.

        Without timing the file depends only on the run's configuration and
        seed, so repeated runs give byte-identical files.
        """
        def fmt(v):
            return "" if v is None else repr(float(v))

        own = isinstance(path_or_file, (str, Path))
        fh = open(path_or_file, "w", newline="") if own else path_or_file
        try:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(TRACE_COLUMNS)
            for r in self.rows:
                writer.writerow([r.step, fmt(r.train_err), fmt(r.train_loss), fmt(r.test_err),
                                 fmt(r.test_loss), fmt(r.elapsed_ms) if timing else ""])
        finally:
            if own:
                fh.close()

    @classmethod
    def from_csv(cls, path):
        def val(s):
            return None if s == "" else float(s)

        trace = cls()
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if tuple(reader.fieldnames or ()) != TRACE_COLUMNS:
                raise ValueError(f"{path}: unexpected trace header {reader.fieldnames}")
            for rec in reader:
                trace.append(TraceRow(int(rec["step"]), val(rec["train_err"]), val(rec["train_loss"]),
                                      val(rec["test_err"]), val(rec["test_loss"]), val(rec["elapsed_ms"])))
        return trace


class Stopwatch:
    def __init__(self):
        self._start = time.perf_counter()

    def elapsed_ms(self):
        return (time.perf_counter() - self._start) * 1000.0


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        obj = obj.item()
    if isinstance(obj, float) and not np.isfinite(obj):
        # JSON has no infinity; null marks a target that was never reached
        return None
    if isinstance(obj, Path):
        return str(obj)
    return obj


def write_summary(path, summary):
    """Write a key-value summary as sorted JSON; non-finite floats become null."""
    with open(path, "w") as fh:
        json.dump(_jsonable(summary), fh, indent=2, sort_keys=True)
        fh.write("\n")
