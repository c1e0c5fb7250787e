"""One-step-ahead evaluation, pooled and per-POI metrics, and report files.

Predictions are compared in original count space: model outputs are
inverse-scaled, clamped at zero, and never rounded.  The naive baseline
repeats the previous observation.  Any object exposing
``predict_windows(dataset)`` (the ARIMA fleet does) plugs into the same
report path.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import models
from .features import Scaler, SequenceDataset
from .series import format_hour


def mae(pred: np.ndarray, target: np.ndarray) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError("prediction and target shapes differ")
    if pred.size == 0:
        raise ValueError("empty metric input")
    return float(np.mean(np.abs(pred - target)))


def rmse(pred: np.ndarray, target: np.ndarray) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError("prediction and target shapes differ")
    if pred.size == 0:
        raise ValueError("empty metric input")
    r = pred - target
    return float(np.sqrt(np.mean(r * r)))


def predict_dataset(
    model: models.RecurrentModel,
    dataset: SequenceDataset,
    count_scaler: Scaler | None,
    forcing: str | None = None,
    dt: float | None = None,
    on_step=None,
) -> np.ndarray:
    """Count-space one-step predictions for every window, clamped at zero.

    The graph architecture keeps its training protocol at evaluation time:
    after each step the state is corrected with the observations for the hour
    just predicted, which are available under the rolling protocol.
    """
    if dataset.n_windows == 0:
        raise ValueError("dataset has no windows")
    forcing = (model.forcing if model.arch == "ctgrn" else "off") if forcing is None else forcing
    targets = dataset.targets if forcing == "mixed" else None
    preds, _ = models.forward_sequence(
        model,
        dataset.inputs,
        targets=targets,
        node_obs=dataset.node_obs,
        forcing=forcing,
        dt=dt,
        on_step=on_step,
    )
    if count_scaler is not None:
        preds = count_scaler.inverse(preds)
    return np.maximum(preds, 0.0)


def naive_predictions(dataset: SequenceDataset) -> np.ndarray:
    """Previous true count as the prediction for each window step."""
    return dataset.raw_counts[:, :-1, :].copy()


def step_latency_ms(model: models.RecurrentModel, n_steps: int = 1000, seed: int = 0) -> float:
    """Mean wall-clock milliseconds per single-sequence forward step."""
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.0, 1.0, size=(model.input_size,))
    h = model.hidden_size
    if model.arch == "lstm":
        state: object = (np.zeros(h), np.zeros(h))
    else:
        state = np.zeros(h)
    tic = time.perf_counter()
    for _ in range(n_steps):
        if model.arch == "rnn":
            state = models.rnn_step(model, state, x)
        elif model.arch == "lstm":
            state = models.lstm_step(model, state, x)
        elif model.arch == "ctrnn":
            state = models.ctrnn_step(model, state, x)
        else:
            state, _ = models.ctgrn_step(model, state, x)
    elapsed = time.perf_counter() - tic
    return elapsed * 1000.0 / n_steps


@dataclass
class ForecastReport:
    model: str
    config: dict
    pooled_mae: float
    pooled_rmse: float
    per_poi: list[dict]
    traces: dict = field(default_factory=dict)  # poi index -> (hours, true, pred)
    train_minutes: float | None = None
    pred_ms: float | None = None


def _build_report(
    name: str,
    config: dict,
    preds: np.ndarray,
    dataset: SequenceDataset,
    train_minutes: float | None,
    pred_ms: float | None,
) -> ForecastReport:
    truth = dataset.raw_targets
    n_pois = truth.shape[2]
    per_poi = [
        {"poi_id": k, "mae": mae(preds[:, :, k], truth[:, :, k]), "rmse": rmse(preds[:, :, k], truth[:, :, k])}
        for k in range(n_pois)
    ]
    hours = (dataset.start_hours[:, None] + np.arange(1, dataset.seq_len + 1)[None, :]).ravel()
    traces = {
        k: (hours.copy(), truth[:, :, k].ravel().copy(), preds[:, :, k].ravel().copy())
        for k in range(n_pois)
    }
    return ForecastReport(
        model=name,
        config=config,
        pooled_mae=mae(preds, truth),
        pooled_rmse=rmse(preds, truth),
        per_poi=per_poi,
        traces=traces,
        train_minutes=train_minutes,
        pred_ms=pred_ms,
    )


def evaluate(
    predictor,
    dataset: SequenceDataset,
    count_scaler: Scaler | None = None,
    config: dict | None = None,
    train_seconds: float | None = None,
    latency_steps: int = 1000,
    on_step=None,
) -> ForecastReport:
    """Score a model or baseline over the windowed test split.

    ``predictor`` is a :class:`RecurrentModel`, the string ``"naive"``, or any
    object with ``predict_windows(dataset) -> (S, T, P)`` count-space
    predictions (and optionally ``pred_ms`` afterwards).
    """
    config = {} if config is None else config
    train_minutes = None if train_seconds is None else train_seconds / 60.0
    if isinstance(predictor, models.RecurrentModel):
        preds = predict_dataset(predictor, dataset, count_scaler, on_step=on_step)
        pred_ms = step_latency_ms(predictor, n_steps=max(1000, latency_steps))
        return _build_report(predictor.arch, config, preds, dataset, train_minutes, pred_ms)
    if predictor == "naive":
        tic = time.perf_counter()
        preds = naive_predictions(dataset)
        steps = dataset.n_windows * dataset.seq_len
        pred_ms = (time.perf_counter() - tic) * 1000.0 / max(steps, 1)
        return _build_report("naive", config, preds, dataset, train_minutes, pred_ms)
    if hasattr(predictor, "predict_windows"):
        tic = time.perf_counter()
        preds = predictor.predict_windows(dataset)
        steps = dataset.n_windows * (dataset.seq_len + 1)
        pred_ms = (time.perf_counter() - tic) * 1000.0 / max(steps, 1)
        name = getattr(predictor, "name", type(predictor).__name__)
        return _build_report(name, config, preds, dataset, train_minutes, pred_ms)
    raise ValueError(f"cannot evaluate object of type {type(predictor).__name__}")


def report_payload(report: ForecastReport) -> dict:
    return {
        "model": report.model,
        "config": report.config,
        "pooled": {"mae": report.pooled_mae, "rmse": report.pooled_rmse},
        "per_poi": report.per_poi,
        "train_minutes": report.train_minutes,
        "pred_ms": report.pred_ms,
    }


def emit_report(report: ForecastReport, out_dir: str | Path) -> list[Path]:
    """Write metrics.json, metrics.csv, and per-POI trace CSVs; returns paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    metrics_json = out / "metrics.json"
    metrics_json.write_text(json.dumps(report_payload(report), sort_keys=True), encoding="utf-8")
    written.append(metrics_json)

    metrics_csv = out / "metrics.csv"
    with metrics_csv.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["poi_id", "mae", "rmse"])
        for row in report.per_poi:
            writer.writerow([row["poi_id"], repr(row["mae"]), repr(row["rmse"])])
        writer.writerow(["pooled", repr(report.pooled_mae), repr(report.pooled_rmse)])
    written.append(metrics_csv)

    traces_dir = out / "traces"
    traces_dir.mkdir(exist_ok=True)
    for k, (hours, truth, preds) in report.traces.items():
        trace_path = traces_dir / f"poi_{k}.csv"
        with trace_path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["timestamp", "true", "pred"])
            for hour, tv, pv in zip(hours, truth, preds):
                writer.writerow([format_hour(int(hour)), repr(float(tv)), repr(float(pv))])
        written.append(trace_path)
    return written


def load_report(out_dir: str | Path) -> dict:
    return json.loads((Path(out_dir) / "metrics.json").read_text(encoding="utf-8"))
