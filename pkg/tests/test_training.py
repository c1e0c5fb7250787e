import math

import numpy as np
import pytest

from flowcast import models, training
from flowcast.features import SequenceDataset
from flowcast.training import (
    AdamState,
    EpochRecord,
    TrainConfig,
    TrainingDiverged,
    adam_step,
    grid_search,
    train,
    worker_cap,
    write_history_csv,
)


def _toy_dataset(seed=0, n_windows=6, seq_len=8, n_in=3, n_out=2):
    rng = np.random.default_rng(seed)
    inputs = rng.uniform(0.0, 1.0, size=(n_windows, seq_len, n_in))
    # learnable target: a fixed linear map of the inputs
    w = rng.normal(size=(n_out, n_in))
    targets = np.tanh(inputs @ w.T)
    raw = np.concatenate([targets[:, :1, :], targets], axis=1)  # satisfies shape contract
    return SequenceDataset(
        inputs=inputs,
        targets=targets,
        raw_counts=raw,
        start_hours=np.arange(n_windows) * (seq_len + 1),
        split="train",
    )


# ---------------------------------------------------------------------------
# config


def test_train_config_validation():
    with pytest.raises(ValueError, match="unknown loss"):
        TrainConfig(loss="l1")
    with pytest.raises(ValueError, match="must be positive"):
        TrainConfig(lr=0.0)
    with pytest.raises(ValueError, match="epochs"):
        TrainConfig(epochs=-1)
    with pytest.raises(ValueError, match="betas"):
        TrainConfig(beta1=1.0)
    with pytest.raises(ValueError, match="patience"):
        TrainConfig(patience=0)
    with pytest.raises(ValueError, match="unknown forcing"):
        TrainConfig(forcing="teacher")


def test_train_config_from_file(tmp_path):
    path = tmp_path / "train.cfg"
    path.write_text(
        "# comment line\n"
        "lr = 0.01\n"
        "epochs=5\n"
        "loss=huber\n"
        "normalize = false\n"
        "patience = none\n"
        "\n"
    )
    cfg = TrainConfig.from_file(path)
    assert cfg.lr == 0.01
    assert cfg.epochs == 5
    assert cfg.loss == "huber"
    assert cfg.normalize is False
    assert cfg.patience is None
    # untouched keys keep their defaults
    assert cfg.batch_size == 16


def test_train_config_from_file_errors(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("learning_rate=0.1\n")
    with pytest.raises(ValueError, match="unknown config key"):
        TrainConfig.from_file(path)
    path.write_text("just some text\n")
    with pytest.raises(ValueError, match="expected key=value"):
        TrainConfig.from_file(path)
    path.write_text("normalize=maybe\n")
    with pytest.raises(ValueError, match="bad boolean"):
        TrainConfig.from_file(path)


def test_train_config_round_trip_dict():
    cfg = TrainConfig(lr=0.02, hidden_size=8)
    clone = TrainConfig(**cfg.to_dict())
    assert clone == cfg


# ---------------------------------------------------------------------------
# adam


def test_adam_first_step_oracle():
    """t=1 bias correction makes the step lr * g / (|g| + eps)."""
    params = {"w": np.array([1.0])}
    grads = {"w": np.array([2.0])}
    cfg = TrainConfig(lr=0.1)
    state = AdamState.for_params(params)
    adam_step(params, grads, state, cfg)
    m_hat = (1 - cfg.beta1) * 2.0 / (1 - cfg.beta1)
    v_hat = (1 - cfg.beta2) * 4.0 / (1 - cfg.beta2)
    want = 1.0 - 0.1 * m_hat / (math.sqrt(v_hat) + cfg.eps)
    assert params["w"][0] == pytest.approx(want, abs=1e-15)
    assert state.t == 1


def test_adam_two_steps_match_reference():
    rng = np.random.default_rng(31)
    params = {"w": rng.normal(size=4)}
    ref = params["w"].copy()
    cfg = TrainConfig(lr=0.05)
    state = AdamState.for_params(params)
    m = np.zeros(4)
    v = np.zeros(4)
    for t in (1, 2):
        g = rng.normal(size=4)
        adam_step(params, {"w": g}, state, cfg)
        m = cfg.beta1 * m + (1 - cfg.beta1) * g
        v = cfg.beta2 * v + (1 - cfg.beta2) * g * g
        ref = ref - cfg.lr * (m / (1 - cfg.beta1**t)) / (np.sqrt(v / (1 - cfg.beta2**t)) + cfg.eps)
    np.testing.assert_allclose(params["w"], ref, atol=1e-15)


def test_adam_rejects_non_finite_gradient():
    params = {"w": np.array([1.0])}
    state = AdamState.for_params(params)
    with pytest.raises(TrainingDiverged, match="'w'"):
        adam_step(params, {"w": np.array([np.nan])}, state, TrainConfig())
    assert params["w"][0] == 1.0  # untouched
    assert state.t == 0


# ---------------------------------------------------------------------------
# training loop


def test_train_zero_epochs_is_identity():
    ds = _toy_dataset()
    rng = np.random.default_rng(1)
    m = models.create_model("rnn", input_size=3, hidden_size=6, output_size=2, rng=rng)
    before = m.copy_params()
    _, history = train(m, ds, TrainConfig(epochs=0, batch_size=4))
    assert history == []
    for k, v in before.items():
        np.testing.assert_array_equal(m.params[k], v)


def test_train_reduces_loss_and_is_deterministic():
    ds = _toy_dataset(seed=3)
    cfg = TrainConfig(epochs=40, batch_size=4, lr=0.01, loss="mse", seed=5)

    def fresh():
        rng = np.random.default_rng(7)
        return models.create_model("rnn", input_size=3, hidden_size=8, output_size=2, rng=rng)

    m1, hist1 = train(fresh(), ds, cfg)
    assert hist1[-1].train_loss < 0.25 * hist1[0].train_loss
    m2, hist2 = train(fresh(), ds, cfg)
    for k in m1.params:
        np.testing.assert_array_equal(m1.params[k], m2.params[k])
    assert [h.train_loss for h in hist1] == [h.train_loss for h in hist2]


def test_train_diverged_loss_raises():
    ds = _toy_dataset(seed=4)
    ds.inputs[0, 0, 0] = np.nan
    rng = np.random.default_rng(2)
    m = models.create_model("rnn", input_size=3, hidden_size=4, output_size=2, rng=rng)
    with pytest.raises(TrainingDiverged, match="epoch 0"):
        train(m, ds, TrainConfig(epochs=1, batch_size=8, seed=0))


def test_train_early_stop_at_plateau():
    """Zero gradient from the first epoch: stops after 1 + patience epochs."""
    ds = _toy_dataset(seed=6, n_windows=10)
    rng = np.random.default_rng(9)
    m = models.create_model("rnn", input_size=3, hidden_size=4, output_size=2, rng=rng)
    preds, _ = models.forward_sequence(m, ds.inputs)
    ds.targets[...] = preds  # already optimal under mse
    ds.raw_counts[:, 1:, :] = preds
    _, history = train(m, ds, TrainConfig(epochs=50, patience=3, batch_size=32, loss="mse"))
    assert len(history) == 4
    assert history[0].val_rmse == history[-1].val_rmse


def test_train_restores_best_validation_params():
    ds = _toy_dataset(seed=8, n_windows=10)
    cfg = TrainConfig(epochs=12, patience=50, batch_size=4, lr=0.05, loss="mse", seed=3)
    rng = np.random.default_rng(11)
    m = models.create_model("rnn", input_size=3, hidden_size=6, output_size=2, rng=rng)
    m, history = train(m, ds, cfg)
    best_epoch = min(history, key=lambda h: h.val_rmse)
    # retrain stopping exactly at the best epoch; parameters must agree
    rng = np.random.default_rng(11)
    m2 = models.create_model("rnn", input_size=3, hidden_size=6, output_size=2, rng=rng)
    m2, _ = train(m2, ds, cfg.__class__(**{**cfg.to_dict(), "epochs": best_epoch.epoch + 1}))
    for k in m.params:
        np.testing.assert_array_equal(m.params[k], m2.params[k])


def test_train_requires_windows():
    ds = _toy_dataset(n_windows=1)
    empty = SequenceDataset(
        inputs=ds.inputs[:0],
        targets=ds.targets[:0],
        raw_counts=ds.raw_counts[:0],
        start_hours=ds.start_hours[:0],
        split="train",
    )
    rng = np.random.default_rng(0)
    m = models.create_model("rnn", input_size=3, hidden_size=4, output_size=2, rng=rng)
    with pytest.raises(ValueError, match="no training windows"):
        train(m, empty, TrainConfig(epochs=1))


def test_write_history_csv(tmp_path):
    path = tmp_path / "history.csv"
    write_history_csv(path, [EpochRecord(0, 0.5, 1.25, 2.5, 0.01)])
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "epoch,train_loss,val_mae,val_rmse,seconds"
    assert lines[1].startswith("0,0.5,1.25,2.5,")


# ---------------------------------------------------------------------------
# grid search


def test_grid_search_planted_winner(preprocessed):
    """A fake trainer makes exactly one cell good; the sweep must find it."""
    bundles = preprocessed.bundles
    target_mean = float(np.mean(bundles[True].test.targets))

    def fake_train(model, dataset, cfg, scaler):
        model.params["W_out"][...] = 0.0
        good = cfg.loss == "mae" and cfg.hidden_size == 8 and cfg.normalize
        model.params["b_out"][...] = target_mean if good else target_mean + 5.0
        return model, []

    cfg = TrainConfig(epochs=1, seed=0, seq_len=bundles[True].train.seq_len)
    rows, best = grid_search(
        ["rnn"],
        bundles,
        cfg,
        losses=["mae", "mse"],
        sizes=[8, 16],
        norms=[True],
        runs=2,
        train_fn=fake_train,
    )
    assert len(rows) == 8
    assert best["rnn"]["loss"] == "mae"
    assert best["rnn"]["size"] == 8
    assert best["rnn"]["norm"] is True
    assert best["rnn"]["model"].params["b_out"][0] == target_mean


def test_grid_search_survives_divergence(preprocessed):
    bundles = preprocessed.bundles

    def flaky_train(model, dataset, cfg, scaler):
        if cfg.hidden_size == 8:
            raise TrainingDiverged("planted failure")
        model.params["W_out"][...] = 0.0
        model.params["b_out"][...] = 0.5
        return model, []

    cfg = TrainConfig(epochs=1, seed=0, seq_len=bundles[True].train.seq_len)
    rows, best = grid_search(
        ["rnn"], bundles, cfg, losses=["mae"], sizes=[8, 16], norms=[True], runs=1, train_fn=flaky_train
    )
    failed = [r for r in rows if r["size"] == 8]
    assert len(failed) == 1 and math.isnan(failed[0]["rmse"])
    assert best["rnn"]["size"] == 16


def test_grid_search_parallel_matches_serial(preprocessed):
    bundles = preprocessed.bundles
    cfg = TrainConfig(epochs=2, batch_size=8, seq_len=bundles[True].train.seq_len)
    kwargs = dict(losses=["mse"], sizes=[4], norms=[True, False], runs=2)
    rows1, best1 = grid_search(["rnn"], bundles, cfg, workers=1, **kwargs)
    rows2, best2 = grid_search(["rnn"], bundles, cfg, workers=2, **kwargs)
    for r1, r2 in zip(rows1, rows2):
        assert r1["mae"] == r2["mae"]
        assert r1["rmse"] == r2["rmse"]
        assert (r1["arch"], r1["loss"], r1["size"], r1["norm"], r1["run"]) == (
            r2["arch"], r2["loss"], r2["size"], r2["norm"], r2["run"],
        )
    for k in best1["rnn"]["model"].params:
        np.testing.assert_array_equal(best1["rnn"]["model"].params[k], best2["rnn"]["model"].params[k])


def test_grid_search_validation(preprocessed):
    bundles = preprocessed.bundles
    cfg = TrainConfig(epochs=1, seq_len=bundles[True].train.seq_len)
    with pytest.raises(ValueError, match="unknown architecture"):
        grid_search(["gru"], bundles, cfg)
    with pytest.raises(ValueError, match="no dataset bundle"):
        grid_search(["rnn"], {True: bundles[True]}, cfg, norms=[False])
    with pytest.raises(ValueError, match="custom train_fn"):
        grid_search(["rnn"], bundles, cfg, train_fn=lambda *a: None, workers=2)


def test_grid_search_ctgrn_needs_graph(preprocessed):
    import dataclasses

    bundles = {k: dataclasses.replace(v, a_hat=None) for k, v in preprocessed.bundles.items()}
    cfg = TrainConfig(epochs=1, seq_len=bundles[True].train.seq_len)
    with pytest.raises(ValueError, match="lacks graph arrays"):
        grid_search(["ctgrn"], bundles, cfg, losses=["mae"], sizes=[8], norms=[True])


def test_grid_csv(tmp_path):
    rows = [
        {"arch": "rnn", "loss": "mae", "size": 8, "norm": True, "run": 0, "mae": 1.5, "rmse": 2.0, "train_seconds": 0.1}
    ]
    path = tmp_path / "grid.csv"
    training.write_grid_csv(path, rows)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "arch,loss,size,norm,run,mae,rmse,train_seconds"
    assert lines[1].startswith("rnn,mae,8,True,0,")


# ---------------------------------------------------------------------------
# worker cap


def test_worker_cap(monkeypatch):
    monkeypatch.delenv("FLOWCAST_THREADS", raising=False)
    assert worker_cap(4) == 4
    assert worker_cap(0) == 1
    monkeypatch.setenv("FLOWCAST_THREADS", "2")
    assert worker_cap(8) == 2
    assert worker_cap(1) == 1
    monkeypatch.setenv("FLOWCAST_THREADS", "abc")
    with pytest.raises(ValueError, match="FLOWCAST_THREADS"):
        worker_cap(4)
