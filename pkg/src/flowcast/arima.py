"""Per-POI ARIMA baseline fitted by conditional sum of squares.

Coefficients are found by gradient descent on the CSS objective with the
same Adam optimizer the sequence models use; residual recursions and their
exact sensitivities run through ``scipy.signal.lfilter``.  Order selection
minimizes AIC over a small grid.  Rolling evaluation keeps O(1) state per
step: appended observation, difference cascade, lag tails.
"""

from __future__ import annotations

import copy
import csv
import itertools
import math
from dataclasses import dataclass, field, replace as dc_replace
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

from .features import SequenceDataset
from .training import AdamState, TrainConfig, adam_step

MAX_P = 3
MAX_D = 2
MAX_Q = 3


def difference(series: np.ndarray, d: int) -> np.ndarray:
    if d not in (0, 1, 2):
        raise ValueError(f"difference order must be 0, 1, or 2, got {d}")
    series = np.asarray(series, dtype=np.float64)
    if series.ndim != 1:
        raise ValueError("expected a one-dimensional series")
    if len(series) <= d:
        raise ValueError("series shorter than the difference order")
    return np.diff(series, n=d) if d else series.copy()


def integrate(diffed: np.ndarray, d: int, anchors: np.ndarray) -> np.ndarray:
    """Rebuild the original series (anchors included) from its d-th difference.

    ``anchors`` holds the first ``d`` values of the original series.  Integer
    valued data round-trips exactly through ``difference``/``integrate``.
    """
    if d not in (0, 1, 2):
        raise ValueError(f"difference order must be 0, 1, or 2, got {d}")
    diffed = np.asarray(diffed, dtype=np.float64)
    anchors = np.asarray(anchors, dtype=np.float64)
    if anchors.shape != (d,):
        raise ValueError(f"expected {d} anchor values, got shape {anchors.shape}")
    if d == 0:
        return diffed.copy()
    inner = integrate(diffed, d - 1, np.diff(anchors)) if d > 1 else diffed
    return np.cumsum(np.concatenate(([anchors[0]], inner)))


def _css_and_grads(w: np.ndarray, p: int, q: int, params: dict) -> tuple[float, dict]:
    """Conditional sum of squared residuals and its exact gradient.

    Conditions on the first ``p`` observations; pre-sample residuals are
    zero.  The residual recursion and every coefficient sensitivity are IIR
    filters in the moving-average polynomial, so each is one ``lfilter`` pass.
    """
    m = len(w)
    c = float(params["c"][0])
    phi = params["phi"]
    theta = params["theta"]
    z = w[p:] - c
    for i in range(1, p + 1):
        z = z - phi[i - 1] * w[p - i : m - i]
    a_poly = np.concatenate(([1.0], theta))
    e = lfilter([1.0], a_poly, z) if q else z
    css = float(e @ e)

    grads = {"c": np.zeros(1), "phi": np.zeros(p), "theta": np.zeros(q)}
    n = len(e)
    ones = np.full(n, -1.0)
    de_dc = lfilter([1.0], a_poly, ones) if q else ones
    grads["c"][0] = 2.0 * float(e @ de_dc)
    for i in range(1, p + 1):
        lagged = -w[p - i : m - i]
        de = lfilter([1.0], a_poly, lagged) if q else lagged
        grads["phi"][i - 1] = 2.0 * float(e @ de)
    for j in range(1, q + 1):
        shifted = np.concatenate((np.zeros(j), e[: n - j]))
        de = lfilter([1.0], a_poly, -shifted)
        grads["theta"][j - 1] = 2.0 * float(e @ de)
    return css, grads


def aic(css: float, n_resid: int, n_params: int) -> float:
    """n ln(CSS/n) + 2k; exact-zero CSS ranks below everything."""
    if n_resid <= 0:
        raise ValueError("need at least one residual")
    if css < 0:
        raise ValueError("negative sum of squares")
    if css == 0.0:
        return float("-inf")
    return n_resid * math.log(css / n_resid) + 2.0 * n_params


@dataclass
class ArimaModel:
    """Fitted coefficients plus the incremental state for rolling forecasts."""

    p: int
    d: int
    q: int
    c: float
    phi: np.ndarray
    theta: np.ndarray
    css: float
    n_resid: int
    history: list = field(default_factory=list)
    _levels: list = field(default_factory=list)  # last value of each difference order 0..d-1
    _w_tail: list = field(default_factory=list)  # last p differenced values, oldest first
    _e_tail: list = field(default_factory=list)  # last q residuals, oldest first

    @property
    def aic(self) -> float:
        return aic(self.css, self.n_resid, self.p + self.q + 1)

    def _predict_w(self) -> float:
        acc = self.c
        for i in range(1, self.p + 1):
            acc += self.phi[i - 1] * self._w_tail[-i]
        for j in range(1, self.q + 1):
            acc += self.theta[j - 1] * self._e_tail[-j]
        return acc

    def forecast_one(self) -> float:
        """One-step-ahead count forecast from the current state, clamped at zero."""
        acc = self._predict_w()
        for level in self._levels:
            acc += level
        return max(0.0, acc)

    def update(self, y_new: float) -> None:
        """Absorb the next observation; constant work per call."""
        y_new = float(y_new)
        w_pred = self._predict_w()
        value = y_new
        for k in range(self.d):
            value, self._levels[k] = value - self._levels[k], value
        w_new = value
        self._e_tail.append(w_new - w_pred)
        self._w_tail.append(w_new)
        del self._e_tail[: max(0, len(self._e_tail) - self.q)]
        del self._w_tail[: max(0, len(self._w_tail) - self.p)]
        self.history.append(y_new)

    def refit(self, lr: float = 0.05, max_iters: int = 400) -> None:
        fresh = fit_css(np.asarray(self.history), self.p, self.d, self.q, lr=lr, max_iters=max_iters)
        self.c, self.phi, self.theta = fresh.c, fresh.phi, fresh.theta
        self.css, self.n_resid = fresh.css, fresh.n_resid
        self._levels, self._w_tail, self._e_tail = fresh._levels, fresh._w_tail, fresh._e_tail


def _seed_state(model: ArimaModel, series: np.ndarray, w: np.ndarray, e: np.ndarray) -> None:
    model.history = [float(v) for v in series]
    model._levels = [float(np.diff(series, n=k)[-1]) for k in range(model.d)]
    model._w_tail = [float(v) for v in w[len(w) - model.p :]] if model.p else []
    if model.q:
        tail = e[max(0, len(e) - model.q) :]
        model._e_tail = [0.0] * (model.q - len(tail)) + [float(v) for v in tail]
    else:
        model._e_tail = []


def fit_css(
    series: np.ndarray,
    p: int,
    d: int,
    q: int,
    lr: float = 0.05,
    max_iters: int = 400,
    tol: float = 1e-9,
) -> ArimaModel:
    """Fit by Adam on the CSS objective with step backoff.

    Every accepted step is non-increasing in CSS; a proposal that raises the
    objective (or leaves the finite range) is rolled back and retried at half
    the learning rate.  Stops after five consecutive negligible improvements.
    """
    series = np.asarray(series, dtype=np.float64)
    if not (0 <= p <= MAX_P and 0 <= q <= MAX_Q):
        raise ValueError(f"order out of range: p={p}, q={q}")
    if len(series) <= d + max(p, q) + 10:
        raise ValueError(
            f"series of length {len(series)} too short to fit order ({p},{d},{q})"
        )
    if not np.all(np.isfinite(series)):
        raise ValueError("series contains non-finite values")

    w = difference(series, d)
    params = {
        "c": np.array([float(np.mean(w))]),
        "phi": np.zeros(p),
        "theta": np.zeros(q),
    }
    cfg = TrainConfig(lr=lr)
    opt = AdamState.for_params(params)
    css_cur, grads = _css_and_grads(w, p, q, params)
    if not np.isfinite(css_cur):
        raise ValueError("non-finite objective at the initial coefficients")

    flat = 0
    backoffs = 0
    for _ in range(max_iters):
        snap_params = {k: v.copy() for k, v in params.items()}
        snap_m = {k: v.copy() for k, v in opt.m.items()}
        snap_v = {k: v.copy() for k, v in opt.v.items()}
        snap_t = opt.t
        adam_step(params, grads, opt, cfg)
        css_new, grads_new = _css_and_grads(w, p, q, params)
        if not np.isfinite(css_new) or css_new > css_cur:
            params.update(snap_params)
            opt.m, opt.v, opt.t = snap_m, snap_v, snap_t
            cfg = dc_replace(cfg, lr=cfg.lr * 0.5)
            backoffs += 1
            if backoffs > 30:
                break
            continue
        backoffs = 0
        gain = css_cur - css_new
        css_cur, grads = css_new, grads_new
        flat = flat + 1 if gain <= tol * max(1.0, css_cur) else 0
        if flat >= 5:
            break

    z = w[p:] - params["c"][0]
    m = len(w)
    for i in range(1, p + 1):
        z = z - params["phi"][i - 1] * w[p - i : m - i]
    resid = lfilter([1.0], np.concatenate(([1.0], params["theta"])), z) if q else z
    model = ArimaModel(
        p=p,
        d=d,
        q=q,
        c=float(params["c"][0]),
        phi=params["phi"].copy(),
        theta=params["theta"].copy(),
        css=css_cur,
        n_resid=len(resid),
    )
    _seed_state(model, series, w, resid)
    return model


def default_grid() -> list[tuple[int, int, int]]:
    return [
        (p, d, q)
        for d, p, q in itertools.product(range(MAX_D + 1), range(MAX_P + 1), range(MAX_Q + 1))
    ]


def select_order(
    series: np.ndarray,
    grid: list[tuple[int, int, int]] | None = None,
    lr: float = 0.05,
    max_iters: int = 400,
) -> tuple[tuple[int, int, int], ArimaModel]:
    """Return the AIC-minimizing order and its fitted model.

    Ties go to the smaller total order p+d+q, then to the lexicographically
    smallest (p, d, q).
    """
    grid = default_grid() if grid is None else list(grid)
    if not grid:
        raise ValueError("empty order grid")
    best: tuple | None = None
    last_error: Exception | None = None
    for order in grid:
        p, d, q = order
        try:
            model = fit_css(series, p, d, q, lr=lr, max_iters=max_iters)
        except ValueError as exc:
            last_error = exc
            continue
        key = (model.aic, p + d + q, order)
        if best is None or key < best[0]:
            best = (key, order, model)
    if best is None:
        raise ValueError(f"no order could be fitted: {last_error}")
    return best[1], best[2]


def rolling_forecast(model: ArimaModel, truths: np.ndarray, refit_every: int = 0) -> np.ndarray:
    """One-step-ahead forecasts over ``truths``, updating after each hour.

    ``refit_every=k`` re-estimates the coefficients on the accumulated
    history after every k absorbed observations; 0 fits once.
    """
    truths = np.asarray(truths, dtype=np.float64)
    preds = np.empty(len(truths))
    for t, y in enumerate(truths):
        preds[t] = model.forecast_one()
        model.update(y)
        if refit_every and (t + 1) % refit_every == 0:
            model.refit()
    return preds


@dataclass
class ArimaFleet:
    """One fitted model per POI plus the rolling-window evaluation adapter."""

    models: list[ArimaModel]
    orders: list[tuple[int, int, int]]
    refit_every: int = 0
    name: str = "arima"

    @classmethod
    def fit(
        cls,
        train_counts: np.ndarray,
        orders: list[tuple[int, int, int]] | None = None,
        refit_every: int = 0,
        lr: float = 0.05,
        max_iters: int = 400,
    ) -> "ArimaFleet":
        """Fit each POI column; ``orders=None`` selects per column by AIC."""
        train_counts = np.asarray(train_counts, dtype=np.float64)
        if train_counts.ndim != 2:
            raise ValueError("expected an (hours, pois) count matrix")
        fitted: list[ArimaModel] = []
        chosen: list[tuple[int, int, int]] = []
        for k in range(train_counts.shape[1]):
            series = train_counts[:, k]
            if orders is None:
                order, model = select_order(series, lr=lr, max_iters=max_iters)
            else:
                order = orders[k]
                model = fit_css(series, *order, lr=lr, max_iters=max_iters)
            fitted.append(model)
            chosen.append(order)
        return cls(models=fitted, orders=chosen, refit_every=refit_every)

    def predict_windows(self, dataset: SequenceDataset) -> np.ndarray:
        """Count-space one-step predictions shaped like the dataset targets.

        The windows must directly continue the fitted series hour by hour;
        the fleet state itself is left untouched (rolling runs on copies).
        """
        width = dataset.seq_len + 1
        starts = dataset.start_hours
        if len(starts) > 1 and not np.all(np.diff(starts) == width):
            raise ValueError("windows are not contiguous; cannot roll forward")
        truth = dataset.raw_counts.reshape(-1, dataset.raw_counts.shape[2])
        n_pois = truth.shape[1]
        if n_pois != len(self.models):
            raise ValueError(f"dataset has {n_pois} POIs, fleet has {len(self.models)}")
        full = np.empty_like(truth)
        for k in range(n_pois):
            model = copy.deepcopy(self.models[k])
            full[:, k] = rolling_forecast(model, truth[:, k], refit_every=self.refit_every)
        keep = np.arange(len(truth)) % width != 0
        return full[keep].reshape(dataset.n_windows, dataset.seq_len, n_pois)


def write_arima_csv(path: str | Path, fleet: ArimaFleet) -> None:
    """Coefficient table: poi_id, order, constant, AR and MA coefficients."""
    max_p = max((m.p for m in fleet.models), default=0)
    max_q = max((m.q for m in fleet.models), default=0)
    header = ["poi_id", "p", "d", "q", "c"]
    header += [f"phi_{i}" for i in range(1, max_p + 1)]
    header += [f"theta_{j}" for j in range(1, max_q + 1)]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for k, model in enumerate(fleet.models):
            row = [k, model.p, model.d, model.q, repr(model.c)]
            row += [repr(float(v)) for v in model.phi] + [""] * (max_p - model.p)
            row += [repr(float(v)) for v in model.theta] + [""] * (max_q - model.q)
            writer.writerow(row)


def fleet_to_dict(fleet: ArimaFleet) -> dict:
    return {
        "format": "flowcast-arima-v1",
        "refit_every": fleet.refit_every,
        "models": [
            {
                "p": m.p,
                "d": m.d,
                "q": m.q,
                "c": m.c,
                "phi": [float(v) for v in m.phi],
                "theta": [float(v) for v in m.theta],
                "css": m.css,
                "n_resid": m.n_resid,
                "history": m.history,
                "levels": m._levels,
                "w_tail": m._w_tail,
                "e_tail": m._e_tail,
            }
            for m in fleet.models
        ],
    }


def fleet_from_dict(payload: dict) -> ArimaFleet:
    if payload.get("format") != "flowcast-arima-v1":
        raise ValueError("not an ARIMA fleet payload")
    fitted = []
    orders = []
    for item in payload["models"]:
        model = ArimaModel(
            p=int(item["p"]),
            d=int(item["d"]),
            q=int(item["q"]),
            c=float(item["c"]),
            phi=np.asarray(item["phi"], dtype=np.float64),
            theta=np.asarray(item["theta"], dtype=np.float64),
            css=float(item["css"]),
            n_resid=int(item["n_resid"]),
            history=[float(v) for v in item["history"]],
        )
        model._levels = [float(v) for v in item["levels"]]
        model._w_tail = [float(v) for v in item["w_tail"]]
        model._e_tail = [float(v) for v in item["e_tail"]]
        fitted.append(model)
        orders.append((model.p, model.d, model.q))
    return ArimaFleet(models=fitted, orders=orders, refit_every=int(payload["refit_every"]))
