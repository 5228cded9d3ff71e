"""Per-step metrics and timing CSV files.

The metrics file holds only run-deterministic fields so identical seeds
produce byte-identical files; wall-clock goes to a sidecar timing file that
the cost report reads.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

from .errors import MetricsError

METRICS_COLUMNS = ["step", "epoch", "lr", "tau", "total_loss", "cfg_losses", "extra"]
TIMING_COLUMNS = ["step", "wall_clock_s"]


@dataclass
class MetricsRecord:
    step: int
    epoch: int
    lr: float
    tau: float
    total_loss: float
    # (cfg key, loss v->v', loss v'->v) per sampled config
    cfg_losses: list
    wall_clock_s: float = 0.0
    extra: dict = field(default_factory=dict)

    def format_cfg_losses(self) -> str:
        return "|".join(f"{key}:{a!r}:{b!r}" for key, a, b in self.cfg_losses)

    def format_extra(self) -> str:
        return "|".join(f"{k}={v!r}" for k, v in sorted(self.extra.items()))


def parse_cfg_losses(cell: str):
    out = []
    if not cell:
        return out
    for part in cell.split("|"):
        key, a, b = part.rsplit(":", 2)
        out.append((key, float(a), float(b)))
    return out


class MetricsWriter:
    """Streams metrics (and wall-clock timings) one row per step."""

    def __init__(self, metrics_path, timing_path=None):
        self._fh = open(metrics_path, "w", newline="")
        self._w = csv.writer(self._fh)
        self._w.writerow(METRICS_COLUMNS)
        self._tfh = None
        if timing_path is not None:
            self._tfh = open(timing_path, "w", newline="")
            self._tw = csv.writer(self._tfh)
            self._tw.writerow(TIMING_COLUMNS)

    def write(self, rec: MetricsRecord):
        self._w.writerow([rec.step, rec.epoch, repr(rec.lr), repr(rec.tau),
                          repr(rec.total_loss), rec.format_cfg_losses(),
                          rec.format_extra()])
        self._fh.flush()
        if self._tfh is not None:
            self._tw.writerow([rec.step, repr(rec.wall_clock_s)])
            self._tfh.flush()

    def close(self):
        self._fh.close()
        if self._tfh is not None:
            self._tfh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_csv(path, expected_columns=None):
    """Rows of a metrics-style CSV as dicts; strict on shape."""
    try:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            rows = list(reader)
    except OSError as exc:
        raise MetricsError(f"cannot read {path}: {exc}") from exc
    if not rows:
        raise MetricsError(f"{path}: empty CSV")
    header = rows[0]
    if expected_columns is not None and header != expected_columns:
        raise MetricsError(f"{path}: unexpected columns {header}")
    out = []
    for i, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise MetricsError(f"{path}: row {i} has {len(row)} cells, header has {len(header)}")
        out.append(dict(zip(header, row)))
    return out


def total_wall_clock(timing_path) -> float:
    rows = read_csv(timing_path, TIMING_COLUMNS)
    return sum(float(r["wall_clock_s"]) for r in rows)
