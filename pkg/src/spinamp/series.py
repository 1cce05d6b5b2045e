"""Uniformly sampled real time series and its CSV form."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

__all__ = ["TimeSeries", "format_float", "write_csv"]


def format_float(x: float) -> str:
    return "%.17g" % x


def write_csv(path, header, columns) -> None:
    """Write equal-length columns with 17 significant digits and LF endings."""
    cols = [np.asarray(c, dtype=float) for c in columns]
    if len({len(c) for c in cols}) > 1:
        raise ValueError("columns differ in length")
    buf = io.StringIO()
    buf.write(",".join(header) + "\n")
    for row in zip(*cols):
        buf.write(",".join(format_float(v) for v in row) + "\n")
    Path(path).write_bytes(buf.getvalue().encode("ascii"))


@dataclass(frozen=True, eq=False)
class TimeSeries:
    """Detector-axis field samples (T) at a fixed ``rate`` starting at ``t0``."""

    samples: np.ndarray
    rate: float
    t0: float = 0.0
    seed: Optional[int] = None

    def __post_init__(self):
        s = np.array(self.samples, dtype=float, copy=True)
        if s.ndim != 1 or s.size < 2:
            raise ValueError("a time series needs at least two samples in one dimension")
        if not (np.isfinite(self.rate) and self.rate > 0):
            raise ValueError("rate must be finite and positive")
        s.setflags(write=False)
        object.__setattr__(self, "samples", s)
        object.__setattr__(self, "rate", float(self.rate))
        object.__setattr__(self, "t0", float(self.t0))

    def __len__(self):
        return self.samples.size

    @property
    def dt(self) -> float:
        return 1.0 / self.rate

    @property
    def times(self) -> np.ndarray:
        return self.t0 + np.arange(self.samples.size) / self.rate

    @property
    def duration(self) -> float:
        return self.samples.size / self.rate

    def __add__(self, other: "TimeSeries") -> "TimeSeries":
        if not isinstance(other, TimeSeries):
            return NotImplemented
        if other.rate != self.rate or len(other) != len(self) or other.t0 != self.t0:
            raise ValueError("time series differ in rate, length or start time")
        return TimeSeries(self.samples + other.samples, self.rate, self.t0)

    def scaled(self, k: float) -> "TimeSeries":
        return TimeSeries(self.samples * k, self.rate, self.t0, self.seed)

    def decimated(self, stride: int) -> "TimeSeries":
        if stride < 1:
            raise ValueError("stride must be >= 1")
        return TimeSeries(self.samples[::stride], self.rate / stride, self.t0, self.seed)

    def to_csv(self, path) -> None:
        write_csv(path, ("t_s", "value_T"), (self.times, self.samples))

    @classmethod
    def from_csv(cls, path) -> "TimeSeries":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows or rows[0] != ["t_s", "value_T"]:
            raise ValueError(f"{path}: expected header 't_s,value_T'")
        data = np.array([[float(a), float(b)] for a, b in rows[1:]])
        if len(data) < 2:
            raise ValueError(f"{path}: need at least two samples")
        steps = np.diff(data[:, 0])
        dt = (data[-1, 0] - data[0, 0]) / (len(data) - 1)
        if not np.allclose(steps, dt, rtol=1e-9, atol=0):
            raise ValueError(f"{path}: samples are not uniformly spaced")
        return cls(data[:, 1], 1.0 / dt, data[0, 0])
