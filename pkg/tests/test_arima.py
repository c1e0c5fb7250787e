import copy

import numpy as np
import pytest

from flowcast.arima import (
    ArimaFleet,
    ArimaModel,
    _css_and_grads,
    aic,
    default_grid,
    difference,
    fit_css,
    fleet_from_dict,
    fleet_to_dict,
    integrate,
    rolling_forecast,
    select_order,
    write_arima_csv,
)
from flowcast.features import SequenceDataset


def _ar1(n, phi=0.8, c=0.0, sigma=1.0, seed=0):
    rng = np.random.default_rng(seed)
    y = np.empty(n)
    prev = 0.0
    for t in range(n):
        prev = c + phi * prev + sigma * rng.standard_normal()
        y[t] = prev
    return y


# ---------------------------------------------------------------------------
# differencing


def test_difference_integrate_round_trip_exact():
    series = np.array([3.0, 1.0, 4.0, 1.0, 5.0, 9.0, 2.0, 6.0])
    for d in (0, 1, 2):
        w = difference(series, d)
        assert len(w) == len(series) - d
        back = integrate(w, d, series[:d])
        np.testing.assert_array_equal(back, series)


def test_difference_validation():
    with pytest.raises(ValueError, match="must be 0, 1, or 2"):
        difference(np.arange(5.0), 3)
    with pytest.raises(ValueError, match="one-dimensional"):
        difference(np.zeros((3, 2)), 1)
    with pytest.raises(ValueError, match="shorter"):
        difference(np.zeros(2), 2)
    with pytest.raises(ValueError, match="anchor"):
        integrate(np.zeros(3), 1, np.zeros(2))


# ---------------------------------------------------------------------------
# CSS objective


def _css_reference(w, p, q, c, phi, theta):
    """Plain-loop residual recursion, independent of the filter formulation."""
    e = []
    for t in range(p, len(w)):
        z = w[t] - c
        for i in range(1, p + 1):
            z -= phi[i - 1] * w[t - i]
        for j in range(1, q + 1):
            k = len(e) - j
            z -= theta[j - 1] * (e[k] if k >= 0 else 0.0)
        e.append(z)
    e = np.array(e)
    return float(e @ e)


def test_css_matches_loop_reference():
    rng = np.random.default_rng(11)
    w = rng.normal(size=60)
    for p, q in [(0, 0), (1, 0), (0, 1), (2, 1), (1, 2), (3, 3)]:
        params = {
            "c": np.array([0.3]),
            "phi": rng.uniform(-0.4, 0.4, p),
            "theta": rng.uniform(-0.4, 0.4, q),
        }
        css, _ = _css_and_grads(w, p, q, params)
        want = _css_reference(w, p, q, 0.3, params["phi"], params["theta"])
        assert css == pytest.approx(want, rel=1e-12)


def test_css_gradients_match_finite_differences():
    rng = np.random.default_rng(13)
    w = rng.normal(size=80)
    h = 1e-6
    for p, q in [(1, 0), (0, 1), (2, 2), (3, 1)]:
        params = {
            "c": np.array([0.1]),
            "phi": rng.uniform(-0.3, 0.3, p),
            "theta": rng.uniform(-0.3, 0.3, q),
        }
        _, grads = _css_and_grads(w, p, q, params)
        for name in ("c", "phi", "theta"):
            for k in range(len(params[name])):
                params[name][k] += h
                up, _ = _css_and_grads(w, p, q, params)
                params[name][k] -= 2 * h
                dn, _ = _css_and_grads(w, p, q, params)
                params[name][k] += h
                fd = (up - dn) / (2 * h)
                assert grads[name][k] == pytest.approx(fd, rel=1e-5, abs=1e-7)


def test_aic_values():
    # 10 * ln(5/10) + 2*3
    assert aic(5.0, 10, 3) == pytest.approx(10 * np.log(0.5) + 6)
    assert aic(0.0, 10, 3) == float("-inf")
    with pytest.raises(ValueError, match="at least one residual"):
        aic(1.0, 0, 1)
    with pytest.raises(ValueError, match="negative"):
        aic(-1.0, 5, 1)


# ---------------------------------------------------------------------------
# fitting


def test_fit_css_recovers_ar1():
    series = _ar1(1200, phi=0.8, seed=3)
    model = fit_css(series, 1, 0, 0)
    assert abs(model.phi[0] - 0.8) < 0.08
    assert model.css < np.var(series) * len(series)  # beats the constant-only fit


def test_fit_css_never_accepts_a_worse_step():
    series = _ar1(300, phi=0.6, seed=5)
    w = difference(series, 0)
    start = {"c": np.array([float(np.mean(w))]), "phi": np.zeros(1), "theta": np.zeros(0)}
    css0, _ = _css_and_grads(w, 1, 0, start)
    # an absurd learning rate must back off rather than diverge
    model = fit_css(series, 1, 0, 0, lr=50.0)
    assert np.isfinite(model.css)
    assert model.css <= css0


def test_fit_css_validation():
    with pytest.raises(ValueError, match="too short"):
        fit_css(np.arange(8.0), 1, 0, 0)
    with pytest.raises(ValueError, match="order out of range"):
        fit_css(np.arange(100.0), 5, 0, 0)
    bad = np.arange(50.0)
    bad[3] = np.nan
    with pytest.raises(ValueError, match="non-finite"):
        fit_css(bad, 1, 0, 0)


def test_linear_trend_fits_exactly_after_one_difference():
    """y = 3 + 2t differences to a constant; (0,1,0) nails it with zero CSS."""
    series = 3.0 + 2.0 * np.arange(40.0)
    model = fit_css(series, 0, 1, 0)
    assert model.c == pytest.approx(2.0, abs=1e-12)
    assert model.css == pytest.approx(0.0, abs=1e-18)
    assert model.forecast_one() == pytest.approx(series[-1] + 2.0, abs=1e-9)


def test_select_order_constant_series_prefers_trivial_models():
    series = np.full(80, 7.0)
    order, model = select_order(series, grid=[(0, 0, 0), (0, 1, 0), (1, 0, 0), (0, 1, 1)])
    # the random-walk candidate reaches zero CSS; the winner can only tie it
    walk = fit_css(series, 0, 1, 0)
    assert walk.aic == float("-inf")
    assert model.aic <= walk.aic
    assert sum(order) <= 1


def test_select_order_recovers_ar1():
    series = _ar1(900, phi=0.8, seed=7)
    order, _ = select_order(series, grid=[(0, 0, 0), (1, 0, 0), (0, 1, 0), (2, 0, 0)])
    assert order == (1, 0, 0)


def test_select_order_empty_grid():
    with pytest.raises(ValueError, match="empty order grid"):
        select_order(np.arange(50.0), grid=[])


def test_default_grid_covers_all_orders():
    grid = default_grid()
    assert len(grid) == 4 * 3 * 4
    assert (0, 0, 0) in grid and (3, 2, 3) in grid


# ---------------------------------------------------------------------------
# rolling state


def test_ar1_one_step_prediction_formula():
    model = ArimaModel(
        p=1, d=0, q=0, c=0.5, phi=np.array([0.8]), theta=np.zeros(0),
        css=1.0, n_resid=10, _levels=[], _w_tail=[2.0], _e_tail=[],
    )
    assert model.forecast_one() == pytest.approx(0.5 + 0.8 * 2.0)
    model.update(3.0)
    assert model._w_tail == [3.0]
    assert model.forecast_one() == pytest.approx(0.5 + 0.8 * 3.0)


def test_forecast_clamps_at_zero():
    model = ArimaModel(
        p=1, d=0, q=0, c=0.0, phi=np.array([0.9]), theta=np.zeros(0),
        css=1.0, n_resid=10, _levels=[], _w_tail=[-4.0], _e_tail=[],
    )
    assert model.forecast_one() == 0.0


def test_update_tracks_difference_levels():
    """d=2 state after a few updates matches recomputing from scratch."""
    series = np.array([1.0, 4.0, 9.0, 16.0, 25.0, 36.0])
    model = fit_css(np.array([0.0, 1.0, 4.0, 9.0, 16.0, 25.0, 36.0, 49.0, 64.0, 81.0, 100.0, 121.0, 144.0]), 0, 2, 0)
    for v in series:
        model.update(v)
    hist = np.asarray(model.history)
    assert model._levels[0] == hist[-1]
    assert model._levels[1] == hist[-1] - hist[-2]


def test_rolling_forecast_matches_manual_loop():
    series = _ar1(200, phi=0.7, c=1.0, seed=9) + 20.0
    fitted = fit_css(series[:150], 1, 0, 1)
    truths = series[150:]
    auto = rolling_forecast(copy.deepcopy(fitted), truths)
    manual = np.empty_like(truths)
    twin = copy.deepcopy(fitted)
    for t, y in enumerate(truths):
        manual[t] = twin.forecast_one()
        twin.update(y)
    np.testing.assert_array_equal(auto, manual)


def test_rolling_forecast_refit_changes_coefficients():
    series = np.concatenate([_ar1(120, phi=0.2, seed=1), _ar1(120, phi=0.2, seed=2) + 30.0])
    model = fit_css(series[:120], 1, 0, 0)
    before = model.c
    rolling_forecast(model, series[120:], refit_every=60)
    assert model.c != before
    assert len(model.history) == 240


# ---------------------------------------------------------------------------
# fleet


def _toy_dataset(counts, width):
    n_windows = len(counts) // width
    used = counts[: n_windows * width]
    raw = used.reshape(n_windows, width, counts.shape[1])
    return SequenceDataset(
        inputs=raw[:, :-1, :].copy(),
        targets=raw[:, 1:, :].copy(),
        raw_counts=raw.copy(),
        start_hours=np.arange(n_windows) * width + 500,
        split="test",
    )


def test_fleet_predict_windows_matches_direct_rolling():
    rng = np.random.default_rng(15)
    counts = rng.poisson(8.0, size=(160, 2)).astype(np.float64)
    fleet = ArimaFleet.fit(counts[:100], orders=[(1, 0, 0), (0, 1, 1)])
    ds = _toy_dataset(counts[100:], width=6)
    preds = fleet.predict_windows(ds)
    assert preds.shape == (10, 5, 2)
    flat = ds.raw_counts.reshape(-1, 2)
    for k in range(2):
        direct = rolling_forecast(copy.deepcopy(fleet.models[k]), flat[:, k])
        keep = np.arange(len(flat)) % 6 != 0
        np.testing.assert_array_equal(preds[:, :, k].ravel(), direct[keep])
    # the fleet itself must stay reusable: a second call gives the same answer
    np.testing.assert_array_equal(fleet.predict_windows(ds), preds)


def test_fleet_rejects_gapped_windows():
    rng = np.random.default_rng(16)
    counts = rng.poisson(5.0, size=(120, 1)).astype(np.float64)
    fleet = ArimaFleet.fit(counts[:60], orders=[(1, 0, 0)])
    ds = _toy_dataset(counts[60:], width=6)
    ds.start_hours = ds.start_hours + np.arange(ds.n_windows)  # break contiguity
    with pytest.raises(ValueError, match="not contiguous"):
        fleet.predict_windows(ds)


def test_fleet_poi_count_mismatch():
    rng = np.random.default_rng(17)
    counts = rng.poisson(5.0, size=(120, 1)).astype(np.float64)
    fleet = ArimaFleet.fit(counts[:60], orders=[(1, 0, 0)])
    ds = _toy_dataset(rng.poisson(5.0, size=(60, 3)).astype(np.float64), width=6)
    with pytest.raises(ValueError, match="fleet has 1"):
        fleet.predict_windows(ds)


def test_fleet_serialization_round_trip(tmp_path):
    rng = np.random.default_rng(19)
    counts = rng.poisson(6.0, size=(150, 2)).astype(np.float64)
    fleet = ArimaFleet.fit(counts[:90], orders=[(2, 0, 1), (0, 1, 0)], refit_every=24)
    clone = fleet_from_dict(fleet_to_dict(fleet))
    assert clone.orders == fleet.orders
    assert clone.refit_every == 24
    ds = _toy_dataset(counts[90:], width=5)
    np.testing.assert_array_equal(clone.predict_windows(ds), fleet.predict_windows(ds))


def test_fleet_from_dict_rejects_unknown_format():
    with pytest.raises(ValueError, match="not an ARIMA fleet"):
        fleet_from_dict({"format": "nope"})


def test_write_arima_csv(tmp_path):
    rng = np.random.default_rng(21)
    counts = rng.poisson(6.0, size=(120, 2)).astype(np.float64)
    fleet = ArimaFleet.fit(counts, orders=[(2, 0, 0), (0, 1, 1)])
    path = tmp_path / "coef.csv"
    write_arima_csv(path, fleet)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "poi_id,p,d,q,c,phi_1,phi_2,theta_1"
    assert len(lines) == 3
    first = lines[1].split(",")
    assert first[:4] == ["0", "2", "0", "0"]
    assert float(first[5]) == pytest.approx(fleet.models[0].phi[0])
