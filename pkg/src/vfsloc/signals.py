"""Uniformly sampled signals and their on-disk formats.

Two formats are supported:

* CSV with a ``time_s,value_v`` header (``value`` for dimensionless data);
* raw little-endian float64 samples (``.f64``) with a JSON sidecar holding
  ``sample_rate``, ``unit``, ``start_time`` and any extra metadata.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import IngestFailed

UNITS = ("volt", "dimensionless")


@dataclass(frozen=True, eq=False)
class SampledSignal:
    samples: np.ndarray
    sample_rate: float
    unit: str = "volt"
    start_time: float = 0.0
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        x = np.asarray(self.samples, dtype=float)
        if x.ndim != 1:
            raise ValueError("samples must be one-dimensional")
        if not self.sample_rate > 0:
            raise ValueError("sample_rate must be positive")
        if self.unit not in UNITS:
            raise ValueError(f"unit must be one of {UNITS}")
        if not np.all(np.isfinite(x)):
            raise ValueError("samples contain non-finite values")
        x.setflags(write=False)
        object.__setattr__(self, "samples", x)

    def __len__(self):
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate

    @property
    def times(self) -> np.ndarray:
        return self.start_time + np.arange(self.samples.size) / self.sample_rate

    def replace(self, samples=None, **changes) -> "SampledSignal":
        changes.setdefault("meta", dict(self.meta))
        return dataclasses.replace(
            self, samples=self.samples if samples is None else samples, **changes)

    def slice(self, start: int, stop: int) -> "SampledSignal":
        return self.replace(self.samples[start:stop],
                            start_time=self.start_time + start / self.sample_rate)


def _value_column(unit):
    return "value_v" if unit == "volt" else "value"


def write_csv(signal: SampledSignal, path: str | Path) -> Path:
    path = Path(path)
    data = np.column_stack([signal.times, signal.samples])
    np.savetxt(path, data, delimiter=",", fmt="%.9g", comments="",
               header=f"time_s,{_value_column(signal.unit)}")
    return path


def read_csv(path: str | Path, sample_rate: float | None = None) -> SampledSignal:
    path = Path(path)
    try:
        with path.open() as fh:
            header = fh.readline().strip().split(",")
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    except (OSError, ValueError) as exc:
        raise IngestFailed(f"cannot read {path}: {exc}") from exc
    if data.shape[1] != 2 or header[0] != "time_s":
        raise IngestFailed(f"{path}: expected columns time_s,value_v")
    t, x = data[:, 0], data[:, 1]
    if sample_rate is None:
        if t.size < 2:
            raise IngestFailed(f"{path}: need two samples to infer the sample rate")
        sample_rate = round((t.size - 1) / (t[-1] - t[0]), 6)
    unit = "volt" if header[1] == "value_v" else "dimensionless"
    return SampledSignal(x, float(sample_rate), unit=unit, start_time=float(t[0]))


def write_raw(signal: SampledSignal, path: str | Path) -> Path:
    """Write ``path`` (.f64) plus ``path.json`` metadata; returns the data path."""
    path = Path(path)
    signal.samples.astype("<f8").tofile(path)
    meta = {"sample_rate": signal.sample_rate, "unit": signal.unit,
            "start_time": signal.start_time, "n_samples": int(signal.samples.size)}
    meta.update(signal.meta)
    Path(str(path) + ".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path


def read_raw(path: str | Path) -> SampledSignal:
    path = Path(path)
    side = Path(str(path) + ".json")
    try:
        meta = json.loads(side.read_text())
        x = np.fromfile(path, dtype="<f8")
    except (OSError, ValueError) as exc:
        raise IngestFailed(f"cannot read {path}: {exc}") from exc
    try:
        sample_rate = float(meta.pop("sample_rate"))
    except KeyError:
        raise IngestFailed(f"{side}: missing sample_rate") from None
    unit = meta.pop("unit", "volt")
    start = float(meta.pop("start_time", 0.0))
    meta.pop("n_samples", None)
    return SampledSignal(x, sample_rate, unit=unit, start_time=start, meta=meta)


def read_signal(path: str | Path, sample_rate: float | None = None) -> SampledSignal:
    path = Path(path)
    if not path.exists():
        raise IngestFailed(f"{path} does not exist")
    if path.suffix.lower() == ".csv":
        return read_csv(path, sample_rate)
    return read_raw(path)
