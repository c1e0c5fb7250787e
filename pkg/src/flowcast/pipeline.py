"""Data-directory plumbing between the CLI commands.

A raw data directory holds the CSVs (street graph, POIs, counts, and
optionally pings/weather/holidays).  ``preprocess`` turns it into windowed
supervised arrays for both normalization variants; ``save_dataset_dir``
persists the pre-window matrices plus layout so bundles rebuild bit-identically
on load.  Run manifests record command, resolved config, input hashes, seed,
and artifact paths.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from datetime import date
from pathlib import Path

import numpy as np

from . import features as ft
from . import graph as gg
from . import models
from .series import HourlySeries, hour_to_datetime, read_counts_csv

DATASET_FORMAT = "flowcast-dataset-v1"
MANIFEST_NAME = "manifest.json"


def file_sha256(path: str | Path) -> str:
    digest = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def hash_files(paths: list[Path]) -> dict[str, str]:
    return {p.name: file_sha256(p) for p in sorted(paths, key=lambda p: p.name)}


def write_manifest(
    out_dir: str | Path,
    command: str,
    config: dict,
    inputs: dict[str, str],
    seed: int | None,
    artifacts: list[Path],
) -> Path:
    from . import __version__

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": "flowcast-manifest-v1",
        "version": __version__,
        "command": command,
        "config": config,
        "inputs": inputs,
        "seed": seed,
        "artifacts": sorted(str(p.relative_to(out)) for p in artifacts),
    }
    path = out / MANIFEST_NAME
    path.write_text(json.dumps(payload, indent=2, sort_keys=True), encoding="utf-8")
    return path


@dataclass
class RawData:
    """Everything loadable from a raw data directory, POIs already attached."""

    graph: gg.StreetGraph
    adjacency: gg.NormalizedAdjacency
    graph_hash: str
    counts: HourlySeries
    node_counts: HourlySeries | None
    skipped_pings: int
    weather: dict | None
    calendar: ft.HolidayCalendar | None
    input_paths: list[Path]


def load_raw(data_dir: str | Path, need_features: bool, need_pings: bool) -> RawData:
    data = Path(data_dir)
    required = ["nodes.csv", "edges.csv", "pois.csv", "counts.csv"]
    for name in required:
        if not (data / name).exists():
            raise FileNotFoundError(f"missing required input file {data / name}")
    street = gg.load_street_graph(data / "nodes.csv", data / "edges.csv")
    pois = gg.load_poi_table(data / "pois.csv")
    graph = gg.attach_pois(street, pois)
    adjacency = gg.normalized_adjacency(graph)
    counts = read_counts_csv(data / "counts.csv")
    if counts.values.shape[1] != len(pois):
        raise ValueError(
            f"counts.csv has {counts.values.shape[1]} POI columns, pois.csv lists {len(pois)}"
        )
    used = [data / name for name in required]

    node_counts = None
    skipped = 0
    pings_path = data / "pings.csv"
    if pings_path.exists():
        pings = gg.read_pings_csv(pings_path)
        end_hour = counts.start_hour + len(counts)
        node_counts, skipped = gg.bin_geolocations(graph, pings, counts.start_hour, end_hour)
        used.append(pings_path)
    elif need_pings:
        raise FileNotFoundError(f"missing required input file {pings_path}")

    weather = None
    calendar = None
    if need_features:
        for name in ("weather.csv", "holidays.csv"):
            if not (data / name).exists():
                raise FileNotFoundError(f"missing required input file {data / name}")
        weather = ft.read_weather_csv(data / "weather.csv")
        year_min = hour_to_datetime(counts.start_hour).date().year
        year_max = hour_to_datetime(counts.start_hour + len(counts) - 1).date().year
        calendar = ft.load_holiday_calendar(data / "holidays.csv", year_min, year_max)
        used += [data / "weather.csv", data / "holidays.csv"]
    return RawData(
        graph=graph,
        adjacency=adjacency,
        graph_hash=gg.graph_fingerprint(graph),
        counts=counts,
        node_counts=node_counts,
        skipped_pings=skipped,
        weather=weather,
        calendar=calendar,
        input_paths=used,
    )


@dataclass
class PreprocessResult:
    bundles: dict  # normalize flag -> DatasetBundle
    meta: dict
    counts: HourlySeries
    feature_frame: ft.FeatureFrame | None
    node_counts: HourlySeries | None
    a_hat: np.ndarray | None
    poi_nodes: np.ndarray | None
    input_paths: list[Path]


def preprocess(
    data_dir: str | Path,
    split_hour: int,
    seq_len: int = 30,
    input_mode: str = "visitors+features",
) -> PreprocessResult:
    """Load a raw directory and window it for both normalization variants."""
    if input_mode not in ft.INPUT_MODES:
        raise ValueError(f"unknown input mode {input_mode!r}")
    need_features = input_mode == "visitors+features"
    raw = load_raw(data_dir, need_features=need_features, need_pings=input_mode == "pings")
    counts = raw.counts
    start_hour = counts.start_hour
    end_hour = start_hour + len(counts)
    if not start_hour < split_hour < end_hour:
        raise ValueError("split boundary must fall inside the data span")

    frame = None
    vocab: list[str] | None = None
    calendar_meta = None
    if need_features:
        calendar = raw.calendar
        calendar.d_max = ft.max_school_gap(calendar, start_hour, split_hour)
        calendar.year_span = max(1, calendar.year_max - calendar.year_min)
        vocab = ft.weather_vocab(raw.weather, start_hour, split_hour)
        frame = ft.build_feature_frame(counts.hours, calendar, raw.weather, vocab)
        calendar_meta = {
            "year_min": calendar.year_min,
            "year_max": calendar.year_max,
            "year0": calendar.year0,
            "year_span": calendar.year_span,
            "d_max": calendar.d_max,
            "national": sorted(d.isoformat() for d in calendar.national),
            "school": sorted(d.isoformat() for d in calendar.school),
        }

    poi_nodes = raw.graph.poi_node_indices()
    bundles = {
        normalize: ft.build_dataset(
            counts,
            frame,
            split_hour,
            seq_len=seq_len,
            normalize=normalize,
            input_mode=input_mode,
            node_counts=raw.node_counts,
            poi_nodes=poi_nodes,
            a_hat=raw.adjacency.a_hat,
            graph_hash=raw.graph_hash,
        )
        for normalize in (True, False)
    }
    meta = {
        "format": DATASET_FORMAT,
        "input_mode": input_mode,
        "seq_len": seq_len,
        "split_hour": int(split_hour),
        "start_hour": int(start_hour),
        "n_hours": len(counts),
        "poi_columns": list(counts.columns),
        "feature_columns": None if frame is None else list(frame.columns),
        "node_columns": None if raw.node_counts is None else list(raw.node_counts.columns),
        "graph_hash": raw.graph_hash,
        "skipped_pings": raw.skipped_pings,
        "vocab": vocab,
        "calendar": calendar_meta,
        "n_nodes": raw.graph.n_nodes,
    }
    return PreprocessResult(
        bundles=bundles,
        meta=meta,
        counts=counts,
        feature_frame=frame,
        node_counts=raw.node_counts,
        a_hat=raw.adjacency.a_hat,
        poi_nodes=poi_nodes,
        input_paths=raw.input_paths,
    )


def save_dataset_dir(out_dir: str | Path, result: PreprocessResult) -> list[Path]:
    """Persist pre-window matrices; bundles rebuild deterministically on load."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    arrays: dict[str, np.ndarray] = {
        "counts_hours": result.counts.hours,
        "counts_values": result.counts.values,
    }
    if result.feature_frame is not None:
        arrays["feature_values"] = result.feature_frame.values
    if result.node_counts is not None:
        arrays["node_values"] = result.node_counts.values
    if result.a_hat is not None:
        arrays["a_hat"] = result.a_hat
        arrays["poi_nodes"] = np.asarray(result.poi_nodes, dtype=np.int64)
    arrays_path = out / "arrays.npz"
    np.savez_compressed(arrays_path, **arrays)
    meta_path = out / "meta.json"
    meta_path.write_text(json.dumps(result.meta, indent=2, sort_keys=True), encoding="utf-8")
    return [arrays_path, meta_path]


def load_dataset_dir(path: str | Path) -> PreprocessResult:
    root = Path(path)
    meta_path = root / "meta.json"
    arrays_path = root / "arrays.npz"
    for p in (meta_path, arrays_path):
        if not p.exists():
            raise FileNotFoundError(f"missing dataset file {p}")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    if meta.get("format") != DATASET_FORMAT:
        raise ValueError(f"{meta_path}: not a recognized dataset directory")
    with np.load(arrays_path) as npz:
        arrays = {k: npz[k] for k in npz.files}

    counts = HourlySeries(arrays["counts_hours"], arrays["counts_values"], meta["poi_columns"])
    frame = None
    if "feature_values" in arrays:
        frame = ft.FeatureFrame(counts.hours, arrays["feature_values"], meta["feature_columns"])
    node_counts = None
    if "node_values" in arrays:
        node_counts = HourlySeries(counts.hours, arrays["node_values"], meta["node_columns"])
    a_hat = arrays.get("a_hat")
    poi_nodes = arrays.get("poi_nodes")

    bundles = {
        normalize: ft.build_dataset(
            counts,
            frame,
            meta["split_hour"],
            seq_len=meta["seq_len"],
            normalize=normalize,
            input_mode=meta["input_mode"],
            node_counts=node_counts,
            poi_nodes=poi_nodes,
            a_hat=a_hat,
            graph_hash=meta["graph_hash"],
        )
        for normalize in (True, False)
    }
    return PreprocessResult(
        bundles=bundles,
        meta=meta,
        counts=counts,
        feature_frame=frame,
        node_counts=node_counts,
        a_hat=a_hat,
        poi_nodes=poi_nodes,
        input_paths=[meta_path, arrays_path],
    )


def _calendar_from_meta(meta: dict) -> ft.HolidayCalendar:
    cal = meta["calendar"]
    return ft.HolidayCalendar(
        national=frozenset(date.fromisoformat(d) for d in cal["national"]),
        school=frozenset(date.fromisoformat(d) for d in cal["school"]),
        year_min=cal["year_min"],
        year_max=cal["year_max"] + 1,  # forecasts may run past the data span
        year0=cal["year0"],
        year_span=cal["year_span"],
        d_max=cal["d_max"],
    )


def forecast_free_running(
    model: models.RecurrentModel,
    result: PreprocessResult,
    horizon: int,
    normalize: bool,
) -> tuple[np.ndarray, np.ndarray]:
    """Multi-step forecast past the data span, feeding predictions back.

    The state warms up over the last complete test window (teacher-forced for
    the graph model, as in evaluation), then runs free for ``horizon`` steps.
    Calendar features are computed for future hours; weather and ping inputs
    hold their last observed values.  Returns (hours, counts) with counts
    shaped (horizon, P).
    """
    if horizon < 1:
        raise ValueError("horizon must be at least one hour")
    meta = result.meta
    bundle = result.bundles[normalize]
    test = bundle.test
    if test.n_windows == 0:
        raise ValueError("no test window to warm the state up")
    scaler = bundle.count_scaler
    last = test.n_windows - 1
    mixed = model.arch == "ctgrn" and model.forcing == "mixed"
    _, cache = models.forward_sequence(
        model,
        test.inputs[last][None],
        targets=test.targets[last][None] if mixed else None,
        node_obs=None if test.node_obs is None else test.node_obs[last][None],
        forcing="mixed" if mixed else "off",
    )
    state = cache["final_state"]  # batched (1, H), or an (h, c) pair of those

    last_hour = int(test.start_hours[last]) + test.seq_len
    scaled_counts = test.targets[last][-1]  # scaled truth for the last covered hour
    input_mode = meta["input_mode"]
    feature_tail = None
    calendar = None
    n_cal = len(ft.CALENDAR_COLUMNS)
    if input_mode == "visitors+features":
        feature_tail = result.feature_frame.values[-1]
        calendar = _calendar_from_meta(meta)
    node_tail = None
    if input_mode == "pings":
        node_tail = bundle.node_scaler.transform(result.node_counts.values[-1][None, :])[0]

    hours = np.arange(last_hour + 1, last_hour + 1 + horizon, dtype=np.int64)
    preds = np.zeros((horizon, len(meta["poi_columns"])))
    for step, hour in enumerate(hours):
        if input_mode == "visitors":
            x = scaled_counts
        elif input_mode == "visitors+features":
            row = feature_tail.copy()
            row[:n_cal] = ft.encode_calendar(int(hour) - 1, calendar)
            row = bundle.feature_scaler.transform(row[None, :])[0]
            x = np.concatenate([scaled_counts, row])
        else:
            x = node_tail
        if model.arch == "rnn":
            state = models.rnn_step(model, state, x)
            pred = models.readout(model, state)
        elif model.arch == "lstm":
            state = models.lstm_step(model, state, x)
            pred = models.readout(model, state[0])
        elif model.arch == "ctrnn":
            state = models.ctrnn_step(model, state, x)
            pred = models.readout(model, state)
        else:
            state, pred = models.ctgrn_step(model, state, x)
        pred = pred[0]
        scaled_counts = np.clip(pred, 0.0, 1.0) if normalize else np.maximum(pred, 0.0)
        preds[step] = np.maximum(scaler.inverse(pred[None, :])[0], 0.0)
    return hours, preds
