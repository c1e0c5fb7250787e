import csv
import json

import pytest

import flowcast
from flowcast import cli, synth
from flowcast.series import format_hour


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    """One CLI workspace per module: generate -> preprocess -> train."""
    root = tmp_path_factory.mktemp("cliws")
    spec = synth.SynthSpec(
        seed=5,
        n_nodes=30,
        n_pois=2,
        n_hours=600,
        events_per_poi=1,
        coverage=0.06,
    )
    spec_path = root / "spec.json"
    spec_path.write_text(json.dumps(spec.to_dict()))
    city = root / "city"
    ds = root / "ds"
    run_rnn = root / "run_rnn"
    run_arima = root / "run_arima"
    assert cli.main(["generate", "--out", str(city), "--spec", str(spec_path)]) == 0
    assert cli.main(["preprocess", "--data", str(city), "--out", str(ds)]) == 0
    assert (
        cli.main(
            [
                "train", "--dataset", str(ds), "--out", str(run_rnn),
                "--arch", "rnn", "--epochs", "2", "--hidden-size", "8", "--seed", "3",
            ]
        )
        == 0
    )
    assert cli.main(["train", "--dataset", str(ds), "--out", str(run_arima), "--arch", "arima"]) == 0
    return {
        "root": root,
        "spec": spec,
        "spec_path": spec_path,
        "city": city,
        "ds": ds,
        "run_rnn": run_rnn,
        "run_arima": run_arima,
    }


def test_version_flag(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["--version"])
    assert exc.value.code == 0
    assert capsys.readouterr().out.strip() == f"flowcast {flowcast.__version__}"


def test_unknown_command_is_a_usage_error():
    with pytest.raises(SystemExit) as exc:
        cli.main(["frobnicate"])
    assert exc.value.code == 2


def test_generate_writes_data_and_manifest(ws):
    names = {p.name for p in ws["city"].iterdir()}
    assert names == {
        "nodes.csv", "edges.csv", "pois.csv", "counts.csv",
        "pings.csv", "weather.csv", "holidays.csv", "spec.json",
        "manifest.json",
    }
    manifest = json.loads((ws["city"] / "manifest.json").read_text())
    assert manifest["command"] == "generate"
    assert manifest["config"] == ws["spec"].to_dict()
    assert manifest["seed"] == 5


def test_generate_is_deterministic_across_directories(ws, tmp_path):
    again = tmp_path / "city2"
    assert cli.main(["generate", "--out", str(again), "--spec", str(ws["spec_path"])]) == 0
    for name in ("counts.csv", "pings.csv", "nodes.csv", "manifest.json"):
        assert (again / name).read_bytes() == (ws["city"] / name).read_bytes()


def test_generate_seed_override_changes_the_data(ws, tmp_path):
    other = tmp_path / "city3"
    assert cli.main(["generate", "--out", str(other), "--spec", str(ws["spec_path"]), "--seed", "99"]) == 0
    assert (other / "counts.csv").read_bytes() != (ws["city"] / "counts.csv").read_bytes()
    assert json.loads((other / "manifest.json").read_text())["seed"] == 99


def test_preprocess_defaults_split_three_quarters_in(ws):
    meta = json.loads((ws["ds"] / "meta.json").read_text())
    spec = ws["spec"]
    assert meta["split_hour"] == spec.start_hour + 3 * (spec.n_hours // 4)
    assert meta["seq_len"] == 30
    assert {p.name for p in ws["ds"].iterdir()} == {"arrays.npz", "meta.json", "manifest.json"}


def test_train_writes_checkpoint_history_and_meta(ws):
    files = {p.name for p in ws["run_rnn"].iterdir()}
    assert files == {"checkpoint.json", "history.csv", "train_meta.json", "manifest.json"}
    with (ws["run_rnn"] / "history.csv").open(newline="") as fh:
        rows = list(csv.reader(fh))
    assert len(rows) == 1 + 2  # header + one row per epoch
    meta = json.loads((ws["run_rnn"] / "train_meta.json").read_text())
    assert meta["arch"] == "rnn" and meta["epochs_run"] == 2
    manifest = json.loads((ws["run_rnn"] / "manifest.json").read_text())
    assert manifest["config"]["arch"] == "rnn"
    assert manifest["config"]["hidden_size"] == 8
    assert manifest["config"]["input_mode"] == "visitors+features"
    assert manifest["seed"] == 3


def test_train_is_deterministic(ws, tmp_path):
    rerun = tmp_path / "rerun"
    assert (
        cli.main(
            [
                "train", "--dataset", str(ws["ds"]), "--out", str(rerun),
                "--arch", "rnn", "--epochs", "2", "--hidden-size", "8", "--seed", "3",
            ]
        )
        == 0
    )
    assert (rerun / "checkpoint.json").read_bytes() == (ws["run_rnn"] / "checkpoint.json").read_bytes()
    assert (rerun / "manifest.json").read_bytes() == (ws["run_rnn"] / "manifest.json").read_bytes()

    def _rows_sans_timing(path):
        with path.open(newline="") as fh:
            return [row[:-1] for row in csv.reader(fh)]  # last column is wall-clock seconds

    assert _rows_sans_timing(rerun / "history.csv") == _rows_sans_timing(ws["run_rnn"] / "history.csv")


def test_train_arima_emits_fleet_and_coefficients(ws):
    files = {p.name for p in ws["run_arima"].iterdir()}
    assert files == {"arima.json", "arima_coefficients.csv", "train_meta.json", "manifest.json"}
    payload = json.loads((ws["run_arima"] / "arima.json").read_text())
    assert payload["format"] == "flowcast-arima-v1"
    with (ws["run_arima"] / "arima_coefficients.csv").open(newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0][:4] == ["poi_id", "p", "d", "q"]
    assert len(rows) == 1 + 2  # one fitted model per POI


def test_train_rejects_the_naive_arch(ws, tmp_path, capsys):
    code = cli.main(
        ["train", "--dataset", str(ws["ds"]), "--out", str(tmp_path / "x"), "--arch", "naive"]
    )
    assert code == 1
    err = capsys.readouterr().err
    assert err.startswith("error:") and "naive" in err


def test_config_file_with_flag_overrides(ws, tmp_path):
    cfg = tmp_path / "train.cfg"
    cfg.write_text("loss = mse\nepochs = 3\nlr = 0.005\n")
    out = tmp_path / "run"
    code = cli.main(
        [
            "train", "--dataset", str(ws["ds"]), "--out", str(out),
            "--arch", "rnn", "--config", str(cfg), "--loss", "huber", "--hidden-size", "4",
        ]
    )
    assert code == 0
    config = json.loads((out / "manifest.json").read_text())["config"]
    assert config["loss"] == "huber"  # flag beats file
    assert config["epochs"] == 3  # file beats default
    assert config["lr"] == 0.005
    assert config["hidden_size"] == 4


def test_evaluate_checkpoint_writes_report(ws, tmp_path):
    out = tmp_path / "report"
    code = cli.main(
        [
            "evaluate", "--dataset", str(ws["ds"]), "--out", str(out),
            "--checkpoint", str(ws["run_rnn"] / "checkpoint.json"),
        ]
    )
    assert code == 0
    metrics = json.loads((out / "metrics.json").read_text())
    assert metrics["model"] == "rnn"
    assert metrics["pooled"]["mae"] >= 0.0
    assert metrics["train_minutes"] is not None
    assert len(metrics["per_poi"]) == 2
    assert (out / "traces" / "poi_0.csv").exists()
    assert (out / "traces" / "poi_1.csv").exists()
    manifest = json.loads((out / "manifest.json").read_text())
    assert "checkpoint.json" in manifest["inputs"]
    assert len(list(out.glob("manifest*"))) == 1


def test_evaluate_is_deterministic_modulo_timing(ws, tmp_path):
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert (
            cli.main(
                [
                    "evaluate", "--dataset", str(ws["ds"]), "--out", str(out),
                    "--checkpoint", str(ws["run_rnn"] / "checkpoint.json"),
                ]
            )
            == 0
        )
        outs.append(json.loads((out / "metrics.json").read_text()))
    for payload in outs:
        payload.pop("pred_ms")
        payload.pop("train_minutes")
    assert outs[0] == outs[1]
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()


def test_evaluate_naive_needs_no_checkpoint(ws, tmp_path):
    out = tmp_path / "naive"
    assert cli.main(["evaluate", "--dataset", str(ws["ds"]), "--out", str(out), "--arch", "naive"]) == 0
    metrics = json.loads((out / "metrics.json").read_text())
    assert metrics["model"] == "naive"
    assert metrics["train_minutes"] is None


def test_evaluate_arima_checkpoint(ws, tmp_path):
    out = tmp_path / "ar"
    code = cli.main(
        [
            "evaluate", "--dataset", str(ws["ds"]), "--out", str(out),
            "--checkpoint", str(ws["run_arima"] / "arima.json"),
        ]
    )
    assert code == 0
    metrics = json.loads((out / "metrics.json").read_text())
    assert metrics["model"] == "arima"
    assert metrics["config"]["arch"] == "arima"
    assert metrics["train_minutes"] is not None  # from the sibling train_meta.json


def test_evaluate_without_predictor_fails(ws, tmp_path, capsys):
    code = cli.main(["evaluate", "--dataset", str(ws["ds"]), "--out", str(tmp_path / "x")])
    assert code == 1
    assert "error:" in capsys.readouterr().err


def test_forecast_recurrent_checkpoint(ws, tmp_path):
    out = tmp_path / "fc"
    code = cli.main(
        [
            "forecast", "--dataset", str(ws["ds"]), "--out", str(out),
            "--checkpoint", str(ws["run_rnn"] / "checkpoint.json"), "--horizon", "12",
        ]
    )
    assert code == 0
    with (out / "forecast.csv").open(newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["poi_id", "step", "timestamp_iso8601", "prediction"]
    assert len(rows) == 1 + 12 * 2
    assert sorted({r[0] for r in rows[1:]}) == ["0", "1"]
    assert [r[1] for r in rows[1:13]] == [str(s) for s in range(12)]
    for row in rows[1:]:
        assert float(row[3]) >= 0.0


def test_forecast_arima_continues_after_the_data(ws, tmp_path):
    out = tmp_path / "fc_ar"
    code = cli.main(
        [
            "forecast", "--dataset", str(ws["ds"]), "--out", str(out),
            "--checkpoint", str(ws["run_arima"] / "arima.json"), "--horizon", "5",
        ]
    )
    assert code == 0
    with (out / "forecast.csv").open(newline="") as fh:
        rows = list(csv.reader(fh))
    assert len(rows) == 1 + 5 * 2
    spec = ws["spec"]
    assert rows[1][2] == format_hour(spec.start_hour + spec.n_hours)


def test_forecast_missing_checkpoint_fails(ws, tmp_path, capsys):
    code = cli.main(
        [
            "forecast", "--dataset", str(ws["ds"]), "--out", str(tmp_path / "x"),
            "--checkpoint", str(tmp_path / "nope.json"),
        ]
    )
    assert code == 1
    assert "does not exist" in capsys.readouterr().err


def test_gridsearch_writes_grid_and_best(ws, tmp_path):
    out = tmp_path / "grid"
    code = cli.main(
        [
            "gridsearch", "--dataset", str(ws["ds"]), "--out", str(out),
            "--archs", "rnn", "--losses", "mae", "--sizes", "8", "--norms", "true",
            "--runs", "1", "--epochs", "1",
        ]
    )
    assert code == 0
    with (out / "grid.csv").open(newline="") as fh:
        rows = list(csv.reader(fh))
    assert len(rows) == 2  # header + the single cell
    best = json.loads((out / "best.json").read_text())
    assert best["rnn"]["loss"] == "mae" and best["rnn"]["size"] == 8
    assert (out / "best_rnn.json").exists()
    assert (out / "manifest.json").exists()


def test_missing_dataset_directory_fails(tmp_path, capsys):
    code = cli.main(
        ["train", "--dataset", str(tmp_path / "nope"), "--out", str(tmp_path / "o"), "--arch", "rnn"]
    )
    assert code == 1
    assert capsys.readouterr().err.startswith("error:")


def test_generate_rejects_bad_spec(tmp_path, capsys):
    bad = tmp_path / "spec.json"
    bad.write_text(json.dumps({"seed": 1, "wheels": 4}))
    code = cli.main(["generate", "--out", str(tmp_path / "city"), "--spec", str(bad)])
    assert code == 1
    assert "wheels" in capsys.readouterr().err


def test_preprocess_missing_counts_fails(tmp_path, capsys):
    (tmp_path / "empty").mkdir()
    code = cli.main(
        ["preprocess", "--data", str(tmp_path / "empty"), "--out", str(tmp_path / "ds")]
    )
    assert code == 1
    assert "counts.csv" in capsys.readouterr().err
