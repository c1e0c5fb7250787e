"""Adam optimization, the sequence training loop, and grid search.

Training shuffles windows every epoch with the configured seed, accumulates
batch-mean gradients over full-length BPTT, and steps Adam once per batch.
Early stopping (optional) holds out the last tenth of the training windows
and restores the parameters of the best validation-RMSE epoch.
"""

from __future__ import annotations

import csv
import os
import time
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import evaluation, models
from .features import DatasetBundle, Scaler, SequenceDataset


class TrainingDiverged(RuntimeError):
    """Raised when a loss or gradient stops being finite."""


@dataclass
class TrainConfig:
    seq_len: int = 30
    batch_size: int = 16
    epochs: int = 300
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    loss: str = "mae"
    hidden_size: int = 32
    normalize: bool = True
    seed: int = 0
    patience: int | None = None
    forcing: str = "mixed"
    dt: float = 1.0

    def __post_init__(self) -> None:
        if self.loss not in models.LOSS_KINDS:
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.forcing not in models.FORCING_MODES:
            raise ValueError(f"unknown forcing mode {self.forcing!r}")
        for name in ("seq_len", "batch_size", "lr", "eps", "hidden_size", "dt"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("betas must lie in [0, 1)")
        if self.patience is not None and self.patience <= 0:
            raise ValueError("patience must be positive when set")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_file(cls, path: str | Path) -> "TrainConfig":
        """Parse a flat ``key=value`` config file; unknown keys are errors."""
        values: dict = {}
        known = {f.name: f for f in fields(cls)}
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            if "=" not in text:
                raise ValueError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, _, raw = text.partition("=")
            key = key.strip()
            raw = raw.strip()
            if key not in known:
                raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
            values[key] = _parse_config_value(key, raw)
        return cls(**values)


def _parse_config_value(key: str, raw: str):
    if key in ("seq_len", "batch_size", "epochs", "hidden_size", "seed"):
        return int(raw)
    if key == "patience":
        return None if raw.lower() in ("", "none", "off") else int(raw)
    if key in ("lr", "beta1", "beta2", "eps", "dt"):
        return float(raw)
    if key == "normalize":
        if raw.lower() in ("true", "1", "yes", "on"):
            return True
        if raw.lower() in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"bad boolean {raw!r} for normalize")
    return raw


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def for_params(cls, params: dict) -> "AdamState":
        return cls(
            m={k: np.zeros_like(v) for k, v in params.items()},
            v={k: np.zeros_like(v) for k, v in params.items()},
        )


def adam_step(params: dict, grads: dict, state: AdamState, config: TrainConfig) -> None:
    """One bias-corrected Adam update, in place.

    Aborts with the parameter name when a gradient stops being finite; the
    parameters are left untouched in that case.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged(f"non-finite gradient for parameter {name!r}")
    state.t += 1
    t = state.t
    b1, b2 = config.beta1, config.beta2
    for name in params:
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        params[name] -= config.lr * m_hat / (np.sqrt(v_hat) + config.eps)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_mae: float
    val_rmse: float
    seconds: float


def write_history_csv(path: str | Path, history: list[EpochRecord]) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_mae", "val_rmse", "seconds"])
        for rec in history:
            writer.writerow([rec.epoch, repr(rec.train_loss), repr(rec.val_mae), repr(rec.val_rmse), repr(rec.seconds)])


def _window_slice(ds: SequenceDataset, idx: np.ndarray) -> tuple:
    node_obs = None if ds.node_obs is None else ds.node_obs[idx]
    return ds.inputs[idx], ds.targets[idx], node_obs


def train(
    model: models.RecurrentModel,
    dataset: SequenceDataset,
    config: TrainConfig,
    count_scaler: Scaler | None = None,
) -> tuple[models.RecurrentModel, list[EpochRecord]]:
    """Train in place and return the model plus one record per epoch.

    With ``config.patience`` set, the last tenth of the windows becomes a
    validation split, training stops after ``patience`` epochs without a new
    best validation RMSE, and the best epoch's parameters are restored.
    ``epochs=0`` leaves the seeded initialization untouched.
    """
    n = dataset.n_windows
    if n == 0:
        raise ValueError("no training windows")
    val_ds: SequenceDataset | None = None
    n_train = n
    if config.patience is not None:
        n_val = max(1, int(round(0.1 * n)))
        if n - n_val < 1:
            raise ValueError("too few windows to hold out a validation split")
        n_train = n - n_val
        val_idx = np.arange(n_train, n)
        val_ds = SequenceDataset(
            inputs=dataset.inputs[val_idx],
            targets=dataset.targets[val_idx],
            raw_counts=dataset.raw_counts[val_idx],
            start_hours=dataset.start_hours[val_idx],
            split="val",
            node_obs=None if dataset.node_obs is None else dataset.node_obs[val_idx],
        )

    rng = np.random.default_rng(config.seed)
    opt = AdamState.for_params(model.params)
    history: list[EpochRecord] = []
    best_rmse = np.inf
    best_params: dict | None = None
    stale = 0
    forcing = config.forcing if model.arch == "ctgrn" else "off"

    for epoch in range(config.epochs):
        tic = time.perf_counter()
        perm = rng.permutation(n_train)
        total = 0.0
        for bno, start in enumerate(range(0, n_train, config.batch_size)):
            idx = perm[start : start + config.batch_size]
            ins, tgt, obs = _window_slice(dataset, idx)
            value, grads, _ = models.loss_and_grads(
                model, ins, tgt, config.loss, node_obs=obs, forcing=forcing, dt=config.dt
            )
            if not np.isfinite(value):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch {bno}")
            try:
                adam_step(model.params, grads, opt, config)
            except TrainingDiverged as exc:
                raise TrainingDiverged(f"epoch {epoch}, batch {bno}: {exc}") from None
            total += value * len(idx)
        train_loss = total / n_train

        val_mae = float("nan")
        val_rmse = float("nan")
        if val_ds is not None:
            preds = evaluation.predict_dataset(model, val_ds, count_scaler, forcing=forcing, dt=config.dt)
            val_mae = evaluation.mae(preds, val_ds.raw_targets)
            val_rmse = evaluation.rmse(preds, val_ds.raw_targets)
        history.append(EpochRecord(epoch, train_loss, val_mae, val_rmse, time.perf_counter() - tic))

        if val_ds is not None:
            if val_rmse < best_rmse:
                best_rmse = val_rmse
                best_params = model.copy_params()
                stale = 0
            else:
                stale += 1
                if stale >= config.patience:
                    break
    if best_params is not None:
        model.set_params(best_params)
    return model, history


# ---------------------------------------------------------------------------
# grid search


GRID_COLUMNS = ["arch", "loss", "size", "norm", "run", "mae", "rmse", "train_seconds"]


def _run_cell(
    arch: str,
    bundle: DatasetBundle,
    cfg: TrainConfig,
    train_fn,
) -> tuple[float, float, float, models.RecurrentModel]:
    rng = np.random.default_rng(cfg.seed)
    hidden = cfg.hidden_size
    kwargs: dict = {}
    if arch == "ctgrn":
        if bundle.a_hat is None or bundle.poi_nodes is None:
            raise ValueError("dataset bundle lacks graph arrays needed by ctgrn")
        hidden = int(bundle.a_hat.shape[0])
        kwargs = {
            "a_hat": bundle.a_hat,
            "poi_nodes": bundle.poi_nodes,
            "graph_hash": bundle.graph_hash,
            "forcing": cfg.forcing,
        }
    model = models.create_model(
        arch,
        input_size=bundle.train.inputs.shape[2],
        hidden_size=hidden,
        output_size=bundle.train.targets.shape[2],
        rng=rng,
        dt=cfg.dt,
        **kwargs,
    )
    tic = time.perf_counter()
    model, _ = train_fn(model, bundle.train, cfg, bundle.count_scaler)
    seconds = time.perf_counter() - tic
    preds = evaluation.predict_dataset(
        model,
        bundle.test,
        bundle.count_scaler,
        forcing=cfg.forcing if arch == "ctgrn" else "off",
        dt=cfg.dt,
    )
    return (
        evaluation.mae(preds, bundle.test.raw_targets),
        evaluation.rmse(preds, bundle.test.raw_targets),
        seconds,
        model,
    )


def worker_cap(requested: int) -> int:
    """Clamp a worker count by the FLOWCAST_THREADS environment variable."""
    cap = os.environ.get("FLOWCAST_THREADS")
    if cap is None:
        return max(1, requested)
    try:
        cap_val = int(cap)
    except ValueError:
        raise ValueError(f"FLOWCAST_THREADS must be an integer, got {cap!r}") from None
    return max(1, min(requested, cap_val))


_worker_bundles: dict | None = None


def _grid_pool_init(bundles: dict) -> None:
    global _worker_bundles
    _worker_bundles = bundles


def _grid_pool_run(payload: tuple) -> tuple:
    arch, cfg = payload
    try:
        return _run_cell(arch, _worker_bundles[cfg.normalize], cfg, train)
    except TrainingDiverged:
        return (float("nan"), float("nan"), float("nan"), None)


def grid_search(
    architectures: list[str],
    bundles: dict[bool, DatasetBundle],
    config: TrainConfig,
    losses: list[str] | None = None,
    sizes: list[int] | None = None,
    norms: list[bool] | None = None,
    runs: int = 3,
    train_fn=None,
    workers: int = 1,
) -> tuple[list[dict], dict]:
    """Train every architecture over the hyperparameter grid.

    Each cell runs ``runs`` times with seeds ``seed, seed+1, ...``; the table
    has one row per run.  Per architecture the cell with the lowest mean test
    RMSE wins and its best run's model is returned.  A diverged run keeps its
    row with NaN metrics and the sweep continues.  For the graph architecture
    the hidden width is pinned to the node count; the size column is recorded
    as configured.  ``workers > 1`` fans runs out over processes; results do
    not depend on the worker count.
    """
    losses = list(models.LOSS_KINDS) if losses is None else losses
    sizes = [32, 64, 128] if sizes is None else sizes
    norms = [True, False] if norms is None else norms
    for norm in norms:
        if norm not in bundles:
            raise ValueError(f"no dataset bundle for normalize={norm}")
    if "ctgrn" in architectures:
        for norm in norms:
            if bundles[norm].a_hat is None or bundles[norm].poi_nodes is None:
                raise ValueError("dataset bundle lacks graph arrays needed by ctgrn")
    for arch in architectures:
        if arch not in models.ARCHITECTURES:
            raise ValueError(f"unknown architecture {arch!r}")
    if train_fn is not None and workers > 1:
        raise ValueError("a custom train_fn only runs with workers=1")

    tasks: list[tuple] = []
    for arch in architectures:
        for kind in losses:
            for size in sizes:
                for norm in norms:
                    for run in range(runs):
                        cfg = replace(
                            config,
                            loss=kind,
                            hidden_size=size,
                            normalize=norm,
                            seed=config.seed + run,
                        )
                        tasks.append((arch, kind, size, norm, run, cfg))

    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(
            max_workers=workers, initializer=_grid_pool_init, initargs=(bundles,)
        ) as pool:
            outcomes = list(pool.map(_grid_pool_run, [(t[0], t[5]) for t in tasks]))
    else:
        fn = train if train_fn is None else train_fn
        outcomes = []
        for arch, _, _, norm, _, cfg in tasks:
            try:
                outcomes.append(_run_cell(arch, bundles[norm], cfg, fn))
            except TrainingDiverged:
                outcomes.append((float("nan"), float("nan"), float("nan"), None))

    rows: list[dict] = []
    cell_results: dict[tuple, list[tuple[float, models.RecurrentModel | None]]] = {}
    for (arch, kind, size, norm, run, _), (cell_mae, cell_rmse, seconds, model) in zip(tasks, outcomes):
        key = (arch, kind, size, norm)
        cell_results.setdefault(key, []).append((cell_rmse, model))
        rows.append(
            {
                "arch": arch,
                "loss": kind,
                "size": size,
                "norm": norm,
                "run": run,
                "mae": cell_mae,
                "rmse": cell_rmse,
                "train_seconds": seconds,
            }
        )

    best: dict[str, dict] = {}
    for arch in architectures:
        ranked = []
        for key, results in cell_results.items():
            if key[0] != arch:
                continue
            scores = [r for r, m in results if np.isfinite(r)]
            if not scores:
                continue
            ranked.append((float(np.mean(scores)), key, results))
        if not ranked:
            continue
        ranked.sort(key=lambda item: (item[0], str(item[1])))
        mean_rmse, key, results = ranked[0]
        run_scores = [(r, i) for i, (r, m) in enumerate(results) if np.isfinite(r)]
        run_scores.sort()
        best_run = run_scores[0][1]
        best[arch] = {
            "loss": key[1],
            "size": key[2],
            "norm": key[3],
            "mean_rmse": mean_rmse,
            "best_run": best_run,
            "model": results[best_run][1],
        }
    return rows, best


def write_grid_csv(path: str | Path, rows: list[dict]) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(GRID_COLUMNS)
        for row in rows:
            writer.writerow(
                [
                    row["arch"],
                    row["loss"],
                    row["size"],
                    row["norm"],
                    row["run"],
                    repr(float(row["mae"])),
                    repr(float(row["rmse"])),
                    repr(float(row["train_seconds"])),
                ]
            )
