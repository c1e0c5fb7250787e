"""Hourly time-series containers and timestamp helpers.

Everything downstream works on a contiguous hourly grid.  Internally a
timestamp is an integer epoch hour (hours since 1970-01-01T00:00Z); CSV
interchange uses ISO-8601 strings.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

HOUR_SECONDS = 3600


def parse_timestamp_seconds(text: str) -> int:
    """ISO-8601 timestamp -> integer epoch seconds.  Naive times are UTC."""
    raw = text.strip()
    try:
        stamp = datetime.fromisoformat(raw.replace("Z", "+00:00"))
    except ValueError as exc:
        raise ValueError(f"bad timestamp {text!r}: {exc}") from None
    if stamp.tzinfo is None:
        stamp = stamp.replace(tzinfo=timezone.utc)
    return int(stamp.timestamp())


def parse_timestamp_hour(text: str) -> int:
    """ISO-8601 timestamp -> epoch hour; rejects values not on the hour."""
    seconds = parse_timestamp_seconds(text)
    if seconds % HOUR_SECONDS:
        raise ValueError(f"timestamp {text!r} is not aligned to a full hour")
    return seconds // HOUR_SECONDS


def hour_of_seconds(seconds: int | float) -> int:
    return int(np.floor(seconds / HOUR_SECONDS))


def hour_to_datetime(hour: int) -> datetime:
    return datetime.fromtimestamp(int(hour) * HOUR_SECONDS, tz=timezone.utc)


def format_hour(hour: int) -> str:
    return hour_to_datetime(hour).strftime("%Y-%m-%dT%H:%M:%S")


def format_seconds(seconds: int | float) -> str:
    stamp = datetime.fromtimestamp(float(seconds), tz=timezone.utc)
    return stamp.strftime("%Y-%m-%dT%H:%M:%S")


@dataclass
class HourlySeries:
    """Count matrix on a contiguous hourly grid: ``values[t, k]`` at ``hours[t]``."""

    hours: np.ndarray
    values: np.ndarray
    columns: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.hours = np.asarray(self.hours, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError("values must be 2-D (hours x columns)")
        if self.hours.shape[0] != self.values.shape[0]:
            raise ValueError("hours and values row counts differ")
        if self.hours.size > 1 and not np.all(np.diff(self.hours) == 1):
            raise ValueError("hours must increase in steps of exactly one hour")
        if not self.columns:
            self.columns = [f"col_{k}" for k in range(self.values.shape[1])]
        if len(self.columns) != self.values.shape[1]:
            raise ValueError("column name count does not match value columns")

    @property
    def start_hour(self) -> int:
        return int(self.hours[0])

    def __len__(self) -> int:
        return int(self.hours.shape[0])

    def index_of(self, hour: int) -> int:
        pos = int(hour) - self.start_hour
        if pos < 0 or pos >= len(self):
            raise ValueError(f"hour {format_hour(hour)} outside series span")
        return pos

    def slice_hours(self, start_hour: int, end_hour: int) -> "HourlySeries":
        lo = self.index_of(start_hour)
        hi = self.index_of(end_hour - 1) + 1
        return HourlySeries(self.hours[lo:hi], self.values[lo:hi], list(self.columns))


def read_counts_csv(path: str | Path) -> HourlySeries:
    """Read ``timestamp_iso8601,poi_0,...`` rows into an :class:`HourlySeries`."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty counts file") from None
        if len(header) < 2:
            raise ValueError(f"{path}: counts header needs a timestamp and at least one column")
        columns = [c.strip() for c in header[1:]]
        hours: list[int] = []
        rows: list[list[float]] = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ValueError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                hours.append(parse_timestamp_hour(row[0]))
                rows.append([float(v) for v in row[1:]])
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
    if not rows:
        raise ValueError(f"{path}: no data rows")
    return HourlySeries(np.array(hours), np.array(rows), columns)


def write_counts_csv(path: str | Path, series: HourlySeries) -> None:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["timestamp_iso8601", *series.columns])
        for t in range(len(series)):
            stamp = format_hour(int(series.hours[t]))
            writer.writerow([stamp, *(repr(float(v)) for v in series.values[t])])
