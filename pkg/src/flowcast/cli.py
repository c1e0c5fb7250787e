"""Command-line interface: generate, preprocess, train, gridsearch, evaluate,
forecast.

Every command writes exactly one ``manifest.json`` into its output directory
recording the resolved configuration, sha256 hashes of the inputs, the seed,
and the artifact paths, so identical invocations are verifiably identical.
Errors print one ``error: ...`` line to stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__, arima, evaluation, models, pipeline, synth, training
from .features import INPUT_MODES
from .series import format_hour, parse_timestamp_hour

CLI_ARCHS = ("naive", "arima", "rnn", "lstm", "ctrnn", "ctgrn")


def _build_config(args) -> training.TrainConfig:
    """Config file first, explicit flags override, dataclass defaults last."""
    cfg = training.TrainConfig.from_file(args.config) if args.config else training.TrainConfig()
    overrides = {}
    for name in ("seed", "loss", "hidden_size", "epochs", "patience", "forcing", "dt", "batch_size", "lr"):
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = value
    if getattr(args, "normalize", None) is not None:
        overrides["normalize"] = args.normalize == "true"
    return replace(cfg, **overrides) if overrides else cfg


def _select_bundle(result: pipeline.PreprocessResult, normalize: bool):
    return result.bundles[normalize]


def _load_predictor(args, result: pipeline.PreprocessResult):
    """Resolve --checkpoint/--arch into (predictor, config, train_seconds)."""
    if args.checkpoint:
        path = Path(args.checkpoint)
        if not path.exists():
            raise FileNotFoundError(f"checkpoint {path} does not exist")
        payload = json.loads(path.read_text(encoding="utf-8"))
        fmt = payload.get("format")
        if fmt == "flowcast-arima-v1":
            fleet = arima.fleet_from_dict(payload)
            return fleet, {"arch": "arima", "refit_every": fleet.refit_every}, _sibling_seconds(path)
        model, _, config = models.load_checkpoint(
            path, a_hat=result.a_hat, graph_hash=result.meta["graph_hash"]
        )
        return model, config or {}, _sibling_seconds(path)
    if args.arch == "naive":
        return "naive", {"arch": "naive"}, None
    if args.arch == "arima":
        tic = time.perf_counter()
        fleet = _fit_fleet(result, args.refit_every)
        return fleet, {"arch": "arima", "refit_every": args.refit_every}, time.perf_counter() - tic
    raise ValueError("evaluate needs --checkpoint or --arch {naive,arima}")


def _sibling_seconds(checkpoint: Path) -> float | None:
    meta = checkpoint.parent / "train_meta.json"
    if meta.exists():
        payload = json.loads(meta.read_text(encoding="utf-8"))
        return payload.get("train_seconds")
    return None


def _fit_fleet(result: pipeline.PreprocessResult, refit_every: int) -> arima.ArimaFleet:
    split_idx = result.meta["split_hour"] - result.meta["start_hour"]
    train_counts = result.counts.values[:split_idx]
    return arima.ArimaFleet.fit(train_counts, refit_every=refit_every)


def cmd_generate(args) -> int:
    spec = synth.SynthSpec.from_file(args.spec) if args.spec else synth.SynthSpec()
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    data = synth.generate(spec)
    out = Path(args.out)
    artifacts = data.write(out)
    inputs = pipeline.hash_files([Path(args.spec)]) if args.spec else {}
    pipeline.write_manifest(out, "generate", spec.to_dict(), inputs, spec.seed, artifacts)
    print(f"generated {len(data.counts)} hours, {len(data.pings)} pings -> {out}")
    return 0


def cmd_preprocess(args) -> int:
    data_dir = Path(args.data)
    counts_path = data_dir / "counts.csv"
    if not counts_path.exists():
        raise FileNotFoundError(f"missing required input file {counts_path}")
    if args.split:
        split_hour = parse_timestamp_hour(args.split)
    else:
        from .series import read_counts_csv

        counts = read_counts_csv(counts_path)
        split_hour = counts.start_hour + 3 * (len(counts) // 4)
    result = pipeline.preprocess(
        data_dir, split_hour, seq_len=args.seq_len, input_mode=args.input_mode
    )
    out = Path(args.out)
    artifacts = pipeline.save_dataset_dir(out, result)
    config = {
        "data": str(data_dir),
        "split_hour": split_hour,
        "split": format_hour(split_hour),
        "seq_len": args.seq_len,
        "input_mode": args.input_mode,
    }
    pipeline.write_manifest(out, "preprocess", config, pipeline.hash_files(result.input_paths), None, artifacts)
    train_w = result.bundles[True].train.n_windows
    test_w = result.bundles[True].test.n_windows
    print(f"dataset ready: {train_w} train windows, {test_w} test windows -> {out}")
    return 0


def _make_model(arch: str, cfg: training.TrainConfig, bundle) -> models.RecurrentModel:
    rng = np.random.default_rng(cfg.seed)
    kwargs: dict = {}
    hidden = cfg.hidden_size
    if arch == "ctgrn":
        if bundle.a_hat is None or bundle.poi_nodes is None:
            raise ValueError("dataset lacks the graph arrays the graph model needs")
        hidden = int(bundle.a_hat.shape[0])
        kwargs = {
            "a_hat": bundle.a_hat,
            "poi_nodes": bundle.poi_nodes,
            "graph_hash": bundle.graph_hash,
            "forcing": cfg.forcing,
        }
    return models.create_model(
        arch,
        input_size=bundle.train.inputs.shape[2],
        hidden_size=hidden,
        output_size=bundle.train.targets.shape[2],
        rng=rng,
        dt=cfg.dt,
        **kwargs,
    )


def cmd_train(args) -> int:
    if args.arch == "naive":
        raise ValueError("the naive baseline has nothing to train; use evaluate --arch naive")
    result = pipeline.load_dataset_dir(args.dataset)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = _build_config(args)
    cfg = replace(cfg, seq_len=result.meta["seq_len"])
    inputs = pipeline.hash_files(result.input_paths)
    artifacts: list[Path]

    if args.arch == "arima":
        tic = time.perf_counter()
        fleet = _fit_fleet(result, args.refit_every)
        seconds = time.perf_counter() - tic
        ckpt = out / "arima.json"
        ckpt.write_text(json.dumps(arima.fleet_to_dict(fleet), sort_keys=True), encoding="utf-8")
        coef = out / "arima_coefficients.csv"
        arima.write_arima_csv(coef, fleet)
        meta = out / "train_meta.json"
        meta.write_text(
            json.dumps({"arch": "arima", "train_seconds": seconds, "orders": fleet.orders}),
            encoding="utf-8",
        )
        artifacts = [ckpt, coef, meta]
        config = {"arch": "arima", "refit_every": args.refit_every}
        pipeline.write_manifest(out, "train", config, inputs, args.seed, artifacts)
        print(f"fitted {len(fleet.models)} ARIMA models in {seconds:.1f}s -> {ckpt}")
        return 0

    bundle = _select_bundle(result, cfg.normalize)
    model = _make_model(args.arch, cfg, bundle)
    tic = time.perf_counter()
    model, history = training.train(model, bundle.train, cfg, bundle.count_scaler)
    seconds = time.perf_counter() - tic
    ckpt = out / "checkpoint.json"
    config = dict(cfg.to_dict(), arch=args.arch, input_mode=result.meta["input_mode"])
    models.save_checkpoint(model, ckpt, scaler=bundle.count_scaler, config=config)
    hist = out / "history.csv"
    training.write_history_csv(hist, history)
    meta = out / "train_meta.json"
    meta.write_text(
        json.dumps({"arch": args.arch, "train_seconds": seconds, "epochs_run": len(history)}),
        encoding="utf-8",
    )
    artifacts = [ckpt, hist, meta]
    pipeline.write_manifest(out, "train", config, inputs, cfg.seed, artifacts)
    print(f"trained {args.arch} for {len(history)} epochs in {seconds:.1f}s -> {ckpt}")
    return 0


def cmd_gridsearch(args) -> int:
    result = pipeline.load_dataset_dir(args.dataset)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = _build_config(args)
    cfg = replace(cfg, seq_len=result.meta["seq_len"])
    archs = [a.strip() for a in args.archs.split(",") if a.strip()]
    losses = [s.strip() for s in args.losses.split(",")] if args.losses else None
    sizes = [int(s) for s in args.sizes.split(",")] if args.sizes else None
    norms = [s.strip() == "true" for s in args.norms.split(",")] if args.norms else None
    workers = training.worker_cap(args.workers)
    rows, best = training.grid_search(
        archs, result.bundles, cfg, losses=losses, sizes=sizes, norms=norms, runs=args.runs, workers=workers
    )
    grid_path = out / "grid.csv"
    training.write_grid_csv(grid_path, rows)
    artifacts = [grid_path]
    summary = {}
    for arch, info in best.items():
        ckpt = out / f"best_{arch}.json"
        config = {
            "arch": arch,
            "loss": info["loss"],
            "hidden_size": info["size"],
            "normalize": info["norm"],
            "seed": cfg.seed + info["best_run"],
            "input_mode": result.meta["input_mode"],
        }
        models.save_checkpoint(
            info["model"], ckpt, scaler=result.bundles[info["norm"]].count_scaler, config=config
        )
        artifacts.append(ckpt)
        summary[arch] = {
            "loss": info["loss"],
            "size": info["size"],
            "norm": info["norm"],
            "mean_rmse": info["mean_rmse"],
            "best_run": info["best_run"],
            "checkpoint": ckpt.name,
        }
    best_path = out / "best.json"
    best_path.write_text(json.dumps(summary, indent=2, sort_keys=True), encoding="utf-8")
    artifacts.append(best_path)
    config = dict(
        cfg.to_dict(),
        archs=archs,
        losses=losses,
        sizes=sizes,
        norms=norms,
        runs=args.runs,
        workers=workers,
    )
    pipeline.write_manifest(out, "gridsearch", config, pipeline.hash_files(result.input_paths), cfg.seed, artifacts)
    print(f"grid search over {len(rows)} runs -> {grid_path}")
    return 0


def cmd_evaluate(args) -> int:
    result = pipeline.load_dataset_dir(args.dataset)
    out = Path(args.out)
    predictor, config, train_seconds = _load_predictor(args, result)
    normalize = bool(config.get("normalize", True)) if isinstance(predictor, models.RecurrentModel) else True
    bundle = _select_bundle(result, normalize)
    report = evaluation.evaluate(
        predictor,
        bundle.test,
        count_scaler=bundle.count_scaler,
        config=config,
        train_seconds=train_seconds,
    )
    artifacts = evaluation.emit_report(report, out)
    inputs = pipeline.hash_files(result.input_paths)
    if args.checkpoint:
        inputs[Path(args.checkpoint).name] = pipeline.file_sha256(args.checkpoint)
    pipeline.write_manifest(out, "evaluate", dict(config), inputs, args.seed, artifacts)
    print(f"{report.model}: pooled MAE {report.pooled_mae:.3f}, RMSE {report.pooled_rmse:.3f} -> {out}")
    return 0


def cmd_forecast(args) -> int:
    result = pipeline.load_dataset_dir(args.dataset)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = Path(args.checkpoint)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint {path} does not exist")
    payload = json.loads(path.read_text(encoding="utf-8"))
    rows: list[tuple[int, int, int, float]] = []  # (poi, step, hour, value)
    if payload.get("format") == "flowcast-arima-v1":
        fleet = arima.fleet_from_dict(payload)
        config: dict = {"arch": "arima"}
        last_hour = result.meta["start_hour"] + result.meta["n_hours"] - 1
        import copy as _copy

        for k, mdl in enumerate(fleet.models):
            mdl = _copy.deepcopy(mdl)
            for step in range(args.horizon):
                value = mdl.forecast_one()
                rows.append((k, step, last_hour + 1 + step, value))
                mdl.update(value)
    else:
        model, _, config = models.load_checkpoint(
            path, a_hat=result.a_hat, graph_hash=result.meta["graph_hash"]
        )
        config = config or {}
        hours, preds = pipeline.forecast_free_running(
            model, result, args.horizon, normalize=bool(config.get("normalize", True))
        )
        for k in range(preds.shape[1]):
            for step in range(args.horizon):
                rows.append((k, step, int(hours[step]), float(preds[step, k])))

    fc_path = out / "forecast.csv"
    with fc_path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["poi_id", "step", "timestamp_iso8601", "prediction"])
        for poi, step, hour, value in rows:
            writer.writerow([poi, step, format_hour(hour), repr(value)])
    inputs = pipeline.hash_files(result.input_paths)
    inputs[path.name] = pipeline.file_sha256(path)
    manifest_config = dict(config, horizon=args.horizon)
    pipeline.write_manifest(out, "forecast", manifest_config, inputs, None, [fc_path])
    print(f"forecast horizon {args.horizon} -> {fc_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flowcast",
        description="Hourly point-of-interest visitor forecasting pipeline.",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common_train_flags(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", default=None, help="key=value config file")
        p.add_argument("--seed", type=int, default=None, help="RNG seed (unset: 0 or config file)")
        p.add_argument("--loss", choices=list(models.LOSS_KINDS), default=None, help="training loss (unset: mae)")
        p.add_argument("--hidden-size", dest="hidden_size", type=int, default=None, help="hidden width (unset: 32)")
        p.add_argument("--epochs", type=int, default=None, help="training epochs (unset: 300)")
        p.add_argument("--batch-size", dest="batch_size", type=int, default=None, help="windows per batch (unset: 16)")
        p.add_argument("--lr", type=float, default=None, help="Adam learning rate (unset: 1e-3)")
        p.add_argument("--patience", type=int, default=None, help="early-stop patience in epochs (unset: off)")
        p.add_argument("--normalize", choices=["true", "false"], default=None, help="min-max scale counts (unset: true)")
        p.add_argument("--forcing", choices=list(models.FORCING_MODES), default=None, help="graph-model forcing (unset: mixed)")
        p.add_argument("--dt", type=float, default=None, help="integration step (unset: 1.0)")

    g = sub.add_parser("generate", help="emit a synthetic city dataset", formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    g.add_argument("--out", required=True, help="output data directory")
    g.add_argument("--spec", default=None, help="JSON generator spec (unset: defaults)")
    g.add_argument("--seed", type=int, default=None, help="override the spec seed")
    g.set_defaults(fn=cmd_generate)

    p = sub.add_parser("preprocess", help="window a raw data directory", formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--data", required=True, help="raw data directory")
    p.add_argument("--out", required=True, help="dataset output directory")
    p.add_argument("--split", default=None, help="test-start timestamp (unset: 3/4 through the span)")
    p.add_argument("--seq-len", dest="seq_len", type=int, default=30, help="transitions per window")
    p.add_argument("--input-mode", dest="input_mode", choices=list(INPUT_MODES), default="visitors+features", help="model input columns")
    p.set_defaults(fn=cmd_preprocess)

    t = sub.add_parser("train", help="train one architecture", formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    t.add_argument("--dataset", required=True, help="preprocessed dataset directory")
    t.add_argument("--out", required=True, help="run output directory")
    t.add_argument("--arch", required=True, choices=list(CLI_ARCHS), help="architecture to train")
    t.add_argument("--refit-every", dest="refit_every", type=int, default=0, help="ARIMA rolling refit interval (0: fit once)")
    common_train_flags(t)
    t.set_defaults(fn=cmd_train)

    gs = sub.add_parser("gridsearch", help="sweep loss/size/normalization", formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    gs.add_argument("--dataset", required=True, help="preprocessed dataset directory")
    gs.add_argument("--out", required=True, help="run output directory")
    gs.add_argument("--archs", default="rnn,lstm,ctrnn,ctgrn", help="comma-separated architectures")
    gs.add_argument("--losses", default=None, help="comma-separated losses (unset: mse,mae,huber)")
    gs.add_argument("--sizes", default=None, help="comma-separated hidden sizes (unset: 32,64,128)")
    gs.add_argument("--norms", default=None, help="comma-separated true/false (unset: both)")
    gs.add_argument("--runs", type=int, default=3, help="runs per grid cell")
    gs.add_argument("--workers", type=int, default=1, help="parallel runs (capped by FLOWCAST_THREADS)")
    common_train_flags(gs)
    gs.set_defaults(fn=cmd_gridsearch)

    e = sub.add_parser("evaluate", help="score a model or baseline on the test split", formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    e.add_argument("--dataset", required=True, help="preprocessed dataset directory")
    e.add_argument("--out", required=True, help="report output directory")
    e.add_argument("--checkpoint", default=None, help="checkpoint file (unset: needs --arch)")
    e.add_argument("--arch", choices=["naive", "arima"], default=None, help="checkpoint-free baseline")
    e.add_argument("--refit-every", dest="refit_every", type=int, default=0, help="ARIMA rolling refit interval (0: fit once)")
    e.add_argument("--seed", type=int, default=None, help="recorded in the manifest")
    e.set_defaults(fn=cmd_evaluate)

    f = sub.add_parser("forecast", help="free-running multi-step forecast", formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    f.add_argument("--dataset", required=True, help="preprocessed dataset directory")
    f.add_argument("--checkpoint", required=True, help="trained checkpoint file")
    f.add_argument("--horizon", type=int, default=24, help="hours to forecast")
    f.add_argument("--out", required=True, help="run output directory")
    f.set_defaults(fn=cmd_forecast)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, KeyError, OSError, training.TrainingDiverged) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
