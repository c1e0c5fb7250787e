"""Exogenous feature construction and supervised dataset assembly.

Calendar features use cyclic month encoding and a days-to-next-school-day
counter; weather joins five numeric channels with a one-hot description.
`build_dataset` splits an hourly count series at a boundary timestamp, fits
min-max scalers on the training span only, and cuts non-overlapping windows
of ``seq_len`` transitions (``seq_len + 1`` consecutive hours each).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from datetime import date, timedelta
from pathlib import Path

import numpy as np

from .series import HourlySeries, hour_to_datetime

CALENDAR_COLUMNS = [
    "hour",
    "year",
    "month_sin",
    "month_cos",
    "day_of_month",
    "day_of_week",
    "holiday_national",
    "holiday_school",
    "days_to_school",
]
WEATHER_NUMERIC_COLUMNS = ["temp", "feels_like", "wind", "precip", "clouds"]

INPUT_MODES = ("visitors", "visitors+features", "pings")


@dataclass
class HolidayCalendar:
    """National and school holiday dates plus encoding constants.

    ``year0``/``year_span`` anchor the linear year feature; ``d_max`` is the
    largest observed gap to the next school day, used as the normalizer.  A
    school day is a weekday that is neither a school nor a national holiday.
    """

    national: frozenset
    school: frozenset
    year_min: int
    year_max: int
    year0: int = 0
    year_span: int = 1
    d_max: int = 1

    def __post_init__(self) -> None:
        if self.year_max < self.year_min:
            raise ValueError("year_max before year_min")
        if self.year0 == 0:
            self.year0 = self.year_min
        if self.year_span < 1:
            self.year_span = 1
        if self.d_max < 1:
            self.d_max = 1

    def covers(self, day: date) -> bool:
        return self.year_min <= day.year <= self.year_max

    def is_school_day(self, day: date) -> bool:
        return day.weekday() < 5 and day not in self.school and day not in self.national

    def days_to_next_school_day(self, day: date) -> int:
        for k in range(1, 400):
            if self.is_school_day(day + timedelta(days=k)):
                return k
        raise ValueError(f"no school day within 400 days after {day}")


def load_holiday_calendar(path: str | Path, year_min: int, year_max: int) -> HolidayCalendar:
    """Read ``date,kind`` rows with kind in {national, school}."""
    path = Path(path)
    national: set[date] = set()
    school: set[date] = set()
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [c.strip().lower() for c in header[:2]] != ["date", "kind"]:
            raise ValueError(f"{path}:1: expected header date,kind")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) < 2:
                raise ValueError(f"{path}:{lineno}: expected 2 fields, got {len(row)}")
            try:
                day = date.fromisoformat(row[0].strip())
            except ValueError:
                raise ValueError(f"{path}:{lineno}: bad date {row[0]!r}") from None
            kind = row[1].strip().lower()
            if kind == "national":
                national.add(day)
            elif kind == "school":
                school.add(day)
            else:
                raise ValueError(f"{path}:{lineno}: unknown holiday kind {row[1]!r}")
    return HolidayCalendar(frozenset(national), frozenset(school), year_min, year_max)


def max_school_gap(calendar: HolidayCalendar, start_hour: int, end_hour: int) -> int:
    """Largest days-to-next-school-day over the days touched by the span."""
    first = hour_to_datetime(start_hour).date()
    last = hour_to_datetime(end_hour - 1).date()
    gap = 1
    day = first
    while day <= last:
        gap = max(gap, calendar.days_to_next_school_day(day))
        day += timedelta(days=1)
    return gap


def encode_calendar(hour: int, calendar: HolidayCalendar) -> np.ndarray:
    """Nine calendar features for one hour; see CALENDAR_COLUMNS for order."""
    stamp = hour_to_datetime(hour)
    day = stamp.date()
    if not calendar.covers(day):
        raise ValueError(f"calendar does not cover {day.isoformat()}")
    angle = 2.0 * np.pi * (stamp.month - 1) / 12.0
    return np.array(
        [
            stamp.hour / 23.0,
            (stamp.year - calendar.year0) / calendar.year_span,
            np.sin(angle),
            np.cos(angle),
            (stamp.day - 1) / 30.0,
            stamp.weekday() / 6.0,
            1.0 if day in calendar.national else 0.0,
            1.0 if day in calendar.school else 0.0,
            calendar.days_to_next_school_day(day) / calendar.d_max,
        ],
        dtype=np.float64,
    )


@dataclass
class WeatherRecord:
    """One hourly weather row; ``None`` marks a missing value."""

    temp: float | None = None
    feels_like: float | None = None
    wind: float | None = None
    precip: float | None = None
    clouds: float | None = None
    description: str | None = None

    def numerics(self) -> list[float | None]:
        return [self.temp, self.feels_like, self.wind, self.precip, self.clouds]


def read_weather_csv(path: str | Path) -> dict[int, WeatherRecord]:
    """Read ``timestamp,temp,feels_like,wind,precip,clouds,description`` rows."""
    from .series import parse_timestamp_hour

    path = Path(path)
    records: dict[int, WeatherRecord] = {}
    expect = ["timestamp", "temp", "feels_like", "wind", "precip", "clouds", "description"]
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [c.strip().lower() for c in header[:7]] != expect:
            raise ValueError(f"{path}:1: expected header {','.join(expect)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) < 7:
                raise ValueError(f"{path}:{lineno}: expected 7 fields, got {len(row)}")
            try:
                hour = parse_timestamp_hour(row[0])
                vals = [float(v) if v.strip() != "" else None for v in row[1:6]]
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
            desc = row[6].strip() or None
            records[hour] = WeatherRecord(*vals, description=desc)
    return records


def weather_vocab(records: dict[int, WeatherRecord], start_hour: int, end_hour: int) -> list[str]:
    """Sorted distinct descriptions seen in [start_hour, end_hour)."""
    seen = {
        rec.description
        for hour, rec in records.items()
        if start_hour <= hour < end_hour and rec.description is not None
    }
    return sorted(seen)


def encode_weather(
    record: WeatherRecord,
    vocab: list[str],
    carry: list[float] | None = None,
) -> tuple[np.ndarray, list[float]]:
    """Numeric channels plus one-hot description.

    Missing numerics take the carried previous value (0.0 with no carry);
    descriptions outside the vocabulary encode as an all-zero block.  Returns
    the feature vector and the carry for the next hour.
    """
    prev = carry if carry is not None else [0.0] * len(WEATHER_NUMERIC_COLUMNS)
    filled = [v if v is not None else prev[k] for k, v in enumerate(record.numerics())]
    onehot = np.zeros(len(vocab), dtype=np.float64)
    if record.description is not None and record.description in vocab:
        onehot[vocab.index(record.description)] = 1.0
    return np.concatenate([np.array(filled, dtype=np.float64), onehot]), filled


@dataclass
class FeatureFrame:
    """Hour-aligned exogenous feature matrix."""

    hours: np.ndarray
    values: np.ndarray
    columns: list[str]

    def __post_init__(self) -> None:
        self.hours = np.asarray(self.hours, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (self.hours.shape[0], len(self.columns)):
            raise ValueError("feature matrix shape does not match hours/columns")
        if self.hours.size > 1 and not np.all(np.diff(self.hours) == 1):
            raise ValueError("hours must increase in steps of exactly one hour")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("non-finite feature value")

    @property
    def start_hour(self) -> int:
        return int(self.hours[0])


def build_feature_frame(
    hours: np.ndarray,
    calendar: HolidayCalendar,
    weather: dict[int, WeatherRecord],
    vocab: list[str],
) -> FeatureFrame:
    """Calendar + weather features for every hour on the grid.

    Weather rows missing entirely are treated as all-missing records so the
    forward fill still advances.
    """
    hours = np.asarray(hours, dtype=np.int64)
    cols = CALENDAR_COLUMNS + WEATHER_NUMERIC_COLUMNS + [f"weather_{w}" for w in vocab]
    out = np.zeros((hours.shape[0], len(cols)), dtype=np.float64)
    carry: list[float] | None = None
    empty = WeatherRecord()
    for t, hour in enumerate(hours):
        cal = encode_calendar(int(hour), calendar)
        rec = weather.get(int(hour), empty)
        wx, carry = encode_weather(rec, vocab, carry)
        out[t, : len(CALENDAR_COLUMNS)] = cal
        out[t, len(CALENDAR_COLUMNS) :] = wx
    return FeatureFrame(hours, out, cols)


@dataclass
class Scaler:
    """Per-column min-max map to [0, 1], fit on the training span only.

    Constant columns map to 0; transformed values clamp to [0, 1] so unseen
    test extremes cannot leave the training range.  ``identity=True`` builds
    a pass-through (used when visitor normalization is disabled).
    """

    mins: np.ndarray
    maxs: np.ndarray
    identity: bool = False

    def __post_init__(self) -> None:
        self.mins = np.asarray(self.mins, dtype=np.float64)
        self.maxs = np.asarray(self.maxs, dtype=np.float64)
        if self.mins.shape != self.maxs.shape or self.mins.ndim != 1:
            raise ValueError("scaler bounds must be matching 1-D arrays")

    @classmethod
    def fit(cls, train: np.ndarray) -> "Scaler":
        train = np.asarray(train, dtype=np.float64)
        if train.ndim != 2 or train.shape[0] == 0:
            raise ValueError("scaler needs a non-empty 2-D training matrix")
        return cls(train.min(axis=0), train.max(axis=0))

    @classmethod
    def passthrough(cls, n_columns: int) -> "Scaler":
        return cls(np.zeros(n_columns), np.ones(n_columns), identity=True)

    @property
    def n_columns(self) -> int:
        return int(self.mins.shape[0])

    def transform(self, values: np.ndarray) -> np.ndarray:
        values = np.asarray(values, dtype=np.float64)
        if values.shape[-1] != self.n_columns:
            raise ValueError("column count mismatch in scaler transform")
        if self.identity:
            return values.copy()
        span = self.maxs - self.mins
        safe = np.where(span > 0.0, span, 1.0)
        scaled = (values - self.mins) / safe
        scaled = np.where(span > 0.0, scaled, 0.0)
        return np.clip(scaled, 0.0, 1.0)

    def inverse(self, values: np.ndarray) -> np.ndarray:
        values = np.asarray(values, dtype=np.float64)
        if values.shape[-1] != self.n_columns:
            raise ValueError("column count mismatch in scaler inverse")
        if self.identity:
            return values.copy()
        return values * (self.maxs - self.mins) + self.mins

    def to_dict(self) -> dict:
        return {"mins": self.mins.tolist(), "maxs": self.maxs.tolist(), "identity": self.identity}

    @classmethod
    def from_dict(cls, payload: dict) -> "Scaler":
        return cls(np.array(payload["mins"]), np.array(payload["maxs"]), bool(payload["identity"]))


def fit_scaler(train: np.ndarray) -> Scaler:
    return Scaler.fit(train)


def apply_scaler(scaler: Scaler, values: np.ndarray) -> np.ndarray:
    return scaler.transform(values)


@dataclass
class SequenceDataset:
    """Windowed supervised arrays for one split.

    ``inputs[w, t]`` feeds step ``t`` of window ``w``; ``targets[w, t]`` is the
    scaled POI count one hour later.  ``raw_counts[w, k]`` holds the unscaled
    POI counts for the ``seq_len + 1`` hours the window covers, and
    ``start_hours[w]`` the epoch hour of the first of them.  ``node_obs`` is
    the per-node observation matrix used by the graph model (scaled counts on
    POI nodes, scaled ping bins elsewhere), aligned like ``raw_counts``.
    """

    inputs: np.ndarray
    targets: np.ndarray
    raw_counts: np.ndarray
    start_hours: np.ndarray
    split: str
    node_obs: np.ndarray | None = None

    def __post_init__(self) -> None:
        s, t, _ = self.inputs.shape
        if self.targets.shape[:2] != (s, t):
            raise ValueError("inputs/targets window shapes differ")
        if self.raw_counts.shape != (s, t + 1, self.targets.shape[2]):
            raise ValueError("raw_counts must cover seq_len + 1 hours per window")
        if self.start_hours.shape != (s,):
            raise ValueError("start_hours must have one entry per window")
        if self.node_obs is not None and self.node_obs.shape[:2] != (s, t + 1):
            raise ValueError("node_obs must cover seq_len + 1 hours per window")

    @property
    def n_windows(self) -> int:
        return int(self.inputs.shape[0])

    @property
    def seq_len(self) -> int:
        return int(self.inputs.shape[1])

    @property
    def raw_targets(self) -> np.ndarray:
        return self.raw_counts[:, 1:, :]


@dataclass
class DatasetBundle:
    """Train/test datasets plus the scalers and layout needed to use them."""

    train: SequenceDataset
    test: SequenceDataset
    count_scaler: Scaler
    feature_scaler: Scaler | None
    node_scaler: Scaler | None
    input_mode: str
    input_columns: list[str]
    poi_columns: list[str]
    normalize: bool
    split_hour: int
    graph_hash: str | None = None
    poi_nodes: np.ndarray | None = None
    a_hat: np.ndarray | None = None


def _window_starts(n_hours: int, seq_len: int) -> np.ndarray:
    width = seq_len + 1
    n = n_hours // width
    return np.arange(n, dtype=np.int64) * width


def _cut_windows(matrix: np.ndarray, starts: np.ndarray, width: int) -> np.ndarray:
    if starts.size == 0:
        return np.zeros((0, width, matrix.shape[1]), dtype=np.float64)
    return np.stack([matrix[s : s + width] for s in starts])


def build_dataset(
    counts: HourlySeries,
    features: FeatureFrame | None,
    split_hour: int,
    seq_len: int = 30,
    normalize: bool = True,
    input_mode: str = "visitors+features",
    node_counts: HourlySeries | None = None,
    poi_nodes: np.ndarray | None = None,
    a_hat: np.ndarray | None = None,
    graph_hash: str | None = None,
) -> DatasetBundle:
    """Split, scale, and window the hourly series into supervised arrays.

    The boundary hour starts the test span.  Scalers fit on training hours
    only.  Windows never straddle the boundary and a trailing remainder
    shorter than ``seq_len + 1`` hours is dropped.
    """
    if input_mode not in INPUT_MODES:
        raise ValueError(f"unknown input mode {input_mode!r}")
    if input_mode == "visitors+features" and features is None:
        raise ValueError("input mode visitors+features requires a feature frame")
    if input_mode == "pings" and node_counts is None:
        raise ValueError("input mode pings requires node counts")
    total = len(counts)
    split_idx = int(split_hour) - counts.start_hour
    if split_idx <= seq_len or split_idx >= total:
        raise ValueError("split boundary outside the data span or train side too short")
    if features is not None:
        if features.start_hour != counts.start_hour or features.hours.shape[0] != total:
            raise ValueError("feature frame misaligned with count series")
    if node_counts is not None:
        if node_counts.start_hour != counts.start_hour or len(node_counts) != total:
            raise ValueError("node counts misaligned with count series")

    count_scaler = Scaler.fit(counts.values[:split_idx]) if normalize else Scaler.passthrough(counts.values.shape[1])
    scaled_counts = count_scaler.transform(counts.values)

    feature_scaler = None
    scaled_features = None
    if features is not None:
        feature_scaler = Scaler.fit(features.values[:split_idx])
        scaled_features = feature_scaler.transform(features.values)

    node_scaler = None
    scaled_nodes = None
    if node_counts is not None:
        if normalize:
            node_scaler = Scaler.fit(node_counts.values[:split_idx])
        else:
            node_scaler = Scaler.passthrough(node_counts.values.shape[1])
        scaled_nodes = node_scaler.transform(node_counts.values)

    if input_mode == "visitors":
        input_matrix = scaled_counts
        input_columns = list(counts.columns)
    elif input_mode == "visitors+features":
        input_matrix = np.hstack([scaled_counts, scaled_features])
        input_columns = list(counts.columns) + list(features.columns)
    else:
        input_matrix = scaled_nodes
        input_columns = list(node_counts.columns)

    node_obs_matrix = None
    if scaled_nodes is not None and poi_nodes is not None:
        node_obs_matrix = scaled_nodes.copy()
        node_obs_matrix[:, np.asarray(poi_nodes, dtype=np.int64)] = scaled_counts

    def cut(split: str, lo: int, hi: int) -> SequenceDataset:
        starts = _window_starts(hi - lo, seq_len) + lo
        width = seq_len + 1
        raw = _cut_windows(counts.values, starts, width)
        ins = _cut_windows(input_matrix, starts, width)[:, :seq_len, :]
        tgt = _cut_windows(scaled_counts, starts, width)[:, 1:, :]
        obs = None
        if node_obs_matrix is not None:
            obs = _cut_windows(node_obs_matrix, starts, width)
        return SequenceDataset(
            inputs=ins,
            targets=tgt,
            raw_counts=raw,
            start_hours=counts.hours[starts] if starts.size else np.zeros(0, dtype=np.int64),
            split=split,
            node_obs=obs,
        )

    train = cut("train", 0, split_idx)
    test = cut("test", split_idx, total)
    if train.n_windows == 0:
        raise ValueError("training split yields no complete windows")
    return DatasetBundle(
        train=train,
        test=test,
        count_scaler=count_scaler,
        feature_scaler=feature_scaler,
        node_scaler=node_scaler,
        input_mode=input_mode,
        input_columns=input_columns,
        poi_columns=list(counts.columns),
        normalize=normalize,
        split_hour=int(split_hour),
        graph_hash=graph_hash,
        poi_nodes=None if poi_nodes is None else np.asarray(poi_nodes, dtype=np.int64),
        a_hat=a_hat,
    )
