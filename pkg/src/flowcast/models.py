"""Recurrent forecasters with hand-written backpropagation through time.

Four architectures share one interface: a vanilla tanh RNN, an LSTM, a
continuous-time RNN integrated with an explicit Euler step, and a graph-masked
continuous-time recurrent network whose hidden state carries one unit per
street-graph node.  The graph variant multiplies its recurrent kernel
elementwise with the row-normalized adjacency, reads predictions off the POI
node states directly, and supports mixed teacher forcing: after each step the
POI states are overwritten with the true scaled counts while the remaining
node states add the observed per-node counts onto the propagated state.

State update of the continuous-time variants, with tau = sigmoid(tau_raw):

    y <- y + dt * (a * tanh(W y + W_in x + b) - tau * y)

where W is the recurrent kernel (masked for the graph variant).  Gradients
below are derived by hand and checked against central finite differences.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

ARCHITECTURES = ("rnn", "lstm", "ctrnn", "ctgrn")
LOSS_KINDS = ("mse", "mae", "huber")
HUBER_DELTA = 1.0
CHECKPOINT_FORMAT = "flowcast-checkpoint-v1"

FORCING_MODES = ("off", "mixed")


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass
class RecurrentModel:
    """Architecture tag plus parameter arrays; graph models carry the mask."""

    arch: str
    input_size: int
    hidden_size: int
    output_size: int
    params: dict = field(default_factory=dict)
    a_hat: np.ndarray | None = None
    poi_nodes: np.ndarray | None = None
    graph_hash: str | None = None
    forcing: str = "off"
    dt: float = 1.0

    def __post_init__(self) -> None:
        if self.arch not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.arch!r}")
        if self.forcing not in FORCING_MODES:
            raise ValueError(f"unknown forcing mode {self.forcing!r}")
        if self.arch == "ctgrn":
            if self.a_hat is None or self.poi_nodes is None:
                raise ValueError("ctgrn needs the normalized adjacency and POI node indices")
            self.a_hat = np.asarray(self.a_hat, dtype=np.float64)
            self.poi_nodes = np.asarray(self.poi_nodes, dtype=np.int64)
            n = self.a_hat.shape[0]
            if self.a_hat.shape != (n, n) or self.hidden_size != n:
                raise ValueError("ctgrn hidden size must equal the adjacency dimension")
            if self.poi_nodes.size != self.output_size:
                raise ValueError("one POI node index per output required")

    def copy_params(self) -> dict:
        return {k: v.copy() for k, v in self.params.items()}

    def set_params(self, params: dict) -> None:
        for k in self.params:
            self.params[k][...] = params[k]


def _glorot(rng: np.random.Generator, shape: tuple[int, int], fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def create_model(
    arch: str,
    input_size: int,
    hidden_size: int,
    output_size: int,
    rng: np.random.Generator,
    a_hat: np.ndarray | None = None,
    poi_nodes: np.ndarray | None = None,
    graph_hash: str | None = None,
    forcing: str = "off",
    dt: float = 1.0,
) -> RecurrentModel:
    """Seeded initialization: Glorot-uniform kernels, zero biases, a = 1,
    tau_raw = 0 (leak 0.5), LSTM forget-gate bias 1."""
    if arch not in ARCHITECTURES:
        raise ValueError(f"unknown architecture {arch!r}")
    params: dict[str, np.ndarray] = {}
    h, i, p = hidden_size, input_size, output_size
    if arch == "ctgrn":
        if a_hat is None or poi_nodes is None:
            raise ValueError("ctgrn needs the normalized adjacency and POI node indices")
        h = int(a_hat.shape[0])
    if arch == "rnn":
        params["W_in"] = _glorot(rng, (h, i), i, h)
        params["W_rec"] = _glorot(rng, (h, h), h, h)
        params["b"] = np.zeros(h)
        params["W_out"] = _glorot(rng, (p, h), h, p)
        params["b_out"] = np.zeros(p)
    elif arch == "lstm":
        params["W_x"] = _glorot(rng, (4 * h, i), i, h)
        params["W_h"] = _glorot(rng, (4 * h, h), h, h)
        b = np.zeros(4 * h)
        b[h : 2 * h] = 1.0  # forget gate starts open
        params["b_g"] = b
        params["W_out"] = _glorot(rng, (p, h), h, p)
        params["b_out"] = np.zeros(p)
    elif arch == "ctrnn":
        params["W_in"] = _glorot(rng, (h, i), i, h)
        params["W_rec"] = _glorot(rng, (h, h), h, h)
        params["b"] = np.zeros(h)
        params["a"] = np.ones(h)
        params["tau_raw"] = np.zeros(h)
        params["W_out"] = _glorot(rng, (p, h), h, p)
        params["b_out"] = np.zeros(p)
    else:  # ctgrn
        params["W_in"] = _glorot(rng, (h, i), i, h)
        params["W_rec"] = _glorot(rng, (h, h), h, h)
        params["b"] = np.zeros(h)
        params["a"] = np.ones(h)
        params["tau_raw"] = np.zeros(h)
    return RecurrentModel(
        arch=arch,
        input_size=i,
        hidden_size=h,
        output_size=p,
        params=params,
        a_hat=a_hat,
        poi_nodes=poi_nodes,
        graph_hash=graph_hash,
        forcing=forcing if arch == "ctgrn" else "off",
        dt=dt,
    )


def naive_forecast(values: np.ndarray) -> np.ndarray:
    """Previous observation carried forward: prediction for t+1 is values[t]."""
    values = np.asarray(values, dtype=np.float64)
    if values.shape[0] < 2:
        raise ValueError("naive forecast needs at least two observations")
    return values[:-1].copy()


# ---------------------------------------------------------------------------
# single-step operations


def _ct_core(y, x, w_eff, w_in, b, a, tau, dt):
    pre = y @ w_eff.T + x @ w_in.T + b
    u = np.tanh(pre)
    deriv = a * u - tau * y
    return y + dt * deriv, u


def rnn_step(model: RecurrentModel, h: np.ndarray, x: np.ndarray) -> np.ndarray:
    p = model.params
    return np.tanh(h @ p["W_rec"].T + x @ p["W_in"].T + p["b"])


def lstm_step(model: RecurrentModel, state: tuple, x: np.ndarray) -> tuple:
    h, c = state
    p = model.params
    hh = model.hidden_size
    pre = h @ p["W_h"].T + x @ p["W_x"].T + p["b_g"]
    i = sigmoid(pre[..., :hh])
    f = sigmoid(pre[..., hh : 2 * hh])
    g = np.tanh(pre[..., 2 * hh : 3 * hh])
    o = sigmoid(pre[..., 3 * hh :])
    c_new = f * c + i * g
    h_new = o * np.tanh(c_new)
    return h_new, c_new


def ctrnn_step(model: RecurrentModel, y: np.ndarray, x: np.ndarray, dt: float | None = None) -> np.ndarray:
    p = model.params
    dt = model.dt if dt is None else dt
    tau = sigmoid(p["tau_raw"])
    y_new, _ = _ct_core(y, x, p["W_rec"], p["W_in"], p["b"], p["a"], tau, dt)
    return y_new


def ctgrn_step(
    model: RecurrentModel,
    y: np.ndarray,
    x: np.ndarray,
    dt: float | None = None,
    targets: np.ndarray | None = None,
    node_obs_next: np.ndarray | None = None,
    forcing: str = "off",
) -> tuple[np.ndarray, np.ndarray]:
    """One graph step.  Returns (next state, prediction).

    The prediction is the POI entries of the propagated state before any
    forcing.  With ``forcing='mixed'`` POI entries of the returned state are
    replaced by ``targets`` and the remaining entries add ``node_obs_next``.
    """
    p = model.params
    dt = model.dt if dt is None else dt
    tau = sigmoid(p["tau_raw"])
    w_eff = p["W_rec"] * model.a_hat
    y_raw, _ = _ct_core(y, x, w_eff, p["W_in"], p["b"], p["a"], tau, dt)
    pred = y_raw[..., model.poi_nodes].copy()
    if forcing == "off":
        return y_raw, pred
    if forcing != "mixed":
        raise ValueError(f"unknown forcing mode {forcing!r}")
    if targets is None:
        raise ValueError("mixed forcing requires the true POI values")
    if node_obs_next is None:
        raise ValueError("mixed forcing requires per-node observations")
    forced = y_raw + node_obs_next
    forced[..., model.poi_nodes] = targets
    return forced, pred


def readout(model: RecurrentModel, state: np.ndarray) -> np.ndarray:
    if model.arch == "ctgrn":
        return state[..., model.poi_nodes]
    p = model.params
    return state @ p["W_out"].T + p["b_out"]


# ---------------------------------------------------------------------------
# losses


def loss(pred: np.ndarray, target: np.ndarray, kind: str) -> tuple[float, np.ndarray]:
    """Mean elementwise loss and its gradient with respect to ``pred``.

    MAE uses subgradient 0 at zero residual; Huber uses delta = 1.
    """
    if kind not in LOSS_KINDS:
        raise ValueError(f"unknown loss kind {kind!r}")
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError("prediction and target shapes differ")
    if pred.size == 0:
        raise ValueError("empty loss input")
    r = pred - target
    n = r.size
    if kind == "mse":
        return float(np.mean(r * r)), 2.0 * r / n
    if kind == "mae":
        return float(np.mean(np.abs(r))), np.sign(r) / n
    small = np.abs(r) <= HUBER_DELTA
    vals = np.where(small, 0.5 * r * r, HUBER_DELTA * (np.abs(r) - 0.5 * HUBER_DELTA))
    grad = np.where(small, r, HUBER_DELTA * np.sign(r)) / n
    return float(np.mean(vals)), grad


# ---------------------------------------------------------------------------
# sequence forward / backward


def _promote(arr: np.ndarray | None, ndim: int):
    if arr is None:
        return None, False
    if arr.ndim == ndim - 1:
        return arr[None], True
    if arr.ndim != ndim:
        raise ValueError(f"expected {ndim - 1}- or {ndim}-dimensional array, got {arr.ndim}")
    return arr, False


def forward_sequence(
    model: RecurrentModel,
    inputs: np.ndarray,
    targets: np.ndarray | None = None,
    node_obs: np.ndarray | None = None,
    forcing: str | None = None,
    dt: float | None = None,
    init_state: np.ndarray | None = None,
    on_step=None,
) -> tuple[np.ndarray, dict]:
    """Run a whole window (or batch of windows) and cache for backward.

    ``inputs`` is (T, I) or (B, T, I); predictions come back with matching
    batch shape.  ``on_step(t)`` fires right after the prediction for step
    ``t`` exists and before any teacher forcing touches later observations.
    """
    forcing = (model.forcing if model.arch == "ctgrn" else "off") if forcing is None else forcing
    if forcing not in FORCING_MODES:
        raise ValueError(f"unknown forcing mode {forcing!r}")
    if forcing == "mixed" and model.arch != "ctgrn":
        raise ValueError("mixed forcing applies to the graph architecture only")
    dt = model.dt if dt is None else float(dt)
    inputs, squeezed = _promote(inputs, 3)
    targets, _ = _promote(targets, 3)
    node_obs, _ = _promote(node_obs, 3)
    bsz, steps, isz = inputs.shape
    if isz != model.input_size:
        raise ValueError(f"input feature size {isz} != model input size {model.input_size}")
    if forcing == "mixed":
        if targets is None:
            raise ValueError("mixed forcing requires targets")
        if node_obs is None:
            raise ValueError("mixed forcing requires per-node observations")

    p = model.params
    h = model.hidden_size
    preds = np.zeros((bsz, steps, model.output_size))
    cache: dict = {"arch": model.arch, "dt": dt, "forcing": forcing, "xs": [], "squeezed": squeezed}

    if model.arch == "lstm":
        hs = np.zeros((bsz, h)) if init_state is None else np.array(init_state[0], dtype=np.float64)
        cs = np.zeros((bsz, h)) if init_state is None else np.array(init_state[1], dtype=np.float64)
        cache.update({"h": [hs], "c": [cs], "gates": []})
        for t in range(steps):
            x = np.asarray(inputs[:, t], dtype=np.float64)
            pre = hs @ p["W_h"].T + x @ p["W_x"].T + p["b_g"]
            gi = sigmoid(pre[:, :h])
            gf = sigmoid(pre[:, h : 2 * h])
            gg = np.tanh(pre[:, 2 * h : 3 * h])
            go = sigmoid(pre[:, 3 * h :])
            cs = gf * cache["c"][-1] + gi * gg
            tc = np.tanh(cs)
            hs = go * tc
            preds[:, t] = hs @ p["W_out"].T + p["b_out"]
            cache["xs"].append(x)
            cache["h"].append(hs)
            cache["c"].append(cs)
            cache["gates"].append((gi, gf, gg, go, tc))
            if on_step is not None:
                on_step(t)
        cache["final_state"] = (hs, cs)
    elif model.arch == "rnn":
        hs = np.zeros((bsz, h)) if init_state is None else np.array(init_state, dtype=np.float64)
        cache.update({"h": [hs]})
        for t in range(steps):
            x = np.asarray(inputs[:, t], dtype=np.float64)
            hs = np.tanh(hs @ p["W_rec"].T + x @ p["W_in"].T + p["b"])
            preds[:, t] = hs @ p["W_out"].T + p["b_out"]
            cache["xs"].append(x)
            cache["h"].append(hs)
            if on_step is not None:
                on_step(t)
        cache["final_state"] = hs
    else:
        tau = sigmoid(p["tau_raw"])
        w_eff = p["W_rec"] * model.a_hat if model.arch == "ctgrn" else p["W_rec"]
        if init_state is not None:
            ys = np.array(init_state, dtype=np.float64)
        elif model.arch == "ctgrn" and node_obs is not None:
            ys = np.asarray(node_obs[:, 0], dtype=np.float64)
        else:
            ys = np.zeros((bsz, h))
        cache.update({"y": [ys], "u": [], "tau": tau, "w_eff": w_eff})
        for t in range(steps):
            x = np.asarray(inputs[:, t], dtype=np.float64)
            y_raw, u = _ct_core(ys, x, w_eff, p["W_in"], p["b"], p["a"], tau, dt)
            if model.arch == "ctgrn":
                preds[:, t] = y_raw[:, model.poi_nodes]
            else:
                preds[:, t] = y_raw @ p["W_out"].T + p["b_out"]
            if on_step is not None:
                on_step(t)
            if forcing == "mixed":
                forced = y_raw + np.asarray(node_obs[:, t + 1], dtype=np.float64)
                forced[:, model.poi_nodes] = np.asarray(targets[:, t], dtype=np.float64)
                ys = forced
            else:
                ys = y_raw
            cache["xs"].append(x)
            cache["u"].append(u)
            cache["y"].append(ys)
        cache["final_state"] = ys
    cache["preds"] = preds
    return (preds[0] if squeezed else preds), cache


def backward(model: RecurrentModel, cache: dict, dpreds: np.ndarray) -> dict:
    """Gradients of the cached forward pass for every parameter.

    ``dpreds`` is the loss gradient with respect to the (possibly batched)
    predictions.  Under mixed forcing the POI entries of the carried state
    were replaced by constants, so no gradient flows back through them; the
    remaining entries passed through an additive observation and propagate.
    """
    p = model.params
    dpreds, _ = _promote(np.asarray(dpreds, dtype=np.float64), 3)
    steps = len(cache["xs"])
    bsz = dpreds.shape[0]
    grads = {k: np.zeros_like(v) for k, v in p.items()}

    if model.arch == "lstm":
        h = model.hidden_size
        dh = np.zeros((bsz, h))
        dc = np.zeros((bsz, h))
        for t in range(steps - 1, -1, -1):
            gi, gf, gg, go, tc = cache["gates"][t]
            hs = cache["h"][t + 1]
            g = dpreds[:, t]
            grads["W_out"] += g.T @ hs
            grads["b_out"] += g.sum(axis=0)
            dh = dh + g @ p["W_out"]
            do = dh * tc
            dc = dc + dh * go * (1.0 - tc * tc)
            di = dc * gg
            dg = dc * gi
            df = dc * cache["c"][t]
            dpre = np.concatenate(
                [
                    di * gi * (1.0 - gi),
                    df * gf * (1.0 - gf),
                    dg * (1.0 - gg * gg),
                    do * go * (1.0 - go),
                ],
                axis=1,
            )
            grads["W_x"] += dpre.T @ cache["xs"][t]
            grads["W_h"] += dpre.T @ cache["h"][t]
            grads["b_g"] += dpre.sum(axis=0)
            dh = dpre @ p["W_h"]
            dc = dc * gf
        return grads

    if model.arch == "rnn":
        h = model.hidden_size
        dh = np.zeros((bsz, h))
        for t in range(steps - 1, -1, -1):
            hs = cache["h"][t + 1]
            g = dpreds[:, t]
            grads["W_out"] += g.T @ hs
            grads["b_out"] += g.sum(axis=0)
            dh = dh + g @ p["W_out"]
            delta = dh * (1.0 - hs * hs)
            grads["W_rec"] += delta.T @ cache["h"][t]
            grads["W_in"] += delta.T @ cache["xs"][t]
            grads["b"] += delta.sum(axis=0)
            dh = delta @ p["W_rec"]
        return grads

    # continuous-time variants
    dt = cache["dt"]
    tau = cache["tau"]
    w_eff = cache["w_eff"]
    forcing = cache["forcing"]
    masked = model.arch == "ctgrn"
    h = model.hidden_size
    dtau = np.zeros(h)
    d_state = np.zeros((bsz, h))  # gradient wrt the *carried* (post-forcing) state
    nonpoi = None
    if masked:
        nonpoi = np.ones(h, dtype=bool)
        nonpoi[model.poi_nodes] = False
    for t in range(steps - 1, -1, -1):
        y_prev = cache["y"][t]
        u = cache["u"][t]
        g = dpreds[:, t]
        dy_raw = np.zeros((bsz, h))
        if forcing == "mixed":
            # POI entries were reset to constants; additive entries pass through
            dy_raw[:, nonpoi] = d_state[:, nonpoi]
        else:
            dy_raw = d_state.copy()
        if masked:
            dy_raw[:, model.poi_nodes] += g
        else:
            y_next = cache["y"][t + 1]
            grads["W_out"] += g.T @ y_next
            grads["b_out"] += g.sum(axis=0)
            dy_raw = dy_raw + g @ p["W_out"]
        du = dy_raw * (dt * p["a"])
        delta = du * (1.0 - u * u)
        grads["a"] += (dy_raw * (dt * u)).sum(axis=0)
        dtau += (dy_raw * (-dt * y_prev)).sum(axis=0)
        if masked:
            grads["W_rec"] += (delta.T @ y_prev) * model.a_hat
        else:
            grads["W_rec"] += delta.T @ y_prev
        grads["W_in"] += delta.T @ cache["xs"][t]
        grads["b"] += delta.sum(axis=0)
        d_state = dy_raw * (1.0 - dt * tau) + delta @ w_eff
    grads["tau_raw"] += dtau * tau * (1.0 - tau)
    return grads


def loss_and_grads(
    model: RecurrentModel,
    inputs: np.ndarray,
    targets: np.ndarray,
    kind: str,
    node_obs: np.ndarray | None = None,
    forcing: str | None = None,
    dt: float | None = None,
) -> tuple[float, dict, np.ndarray]:
    preds, cache = forward_sequence(model, inputs, targets=targets, node_obs=node_obs, forcing=forcing, dt=dt)
    targets_arr = np.asarray(targets, dtype=np.float64)
    value, dpreds = loss(preds, targets_arr, kind)
    grads = backward(model, cache, dpreds)
    return value, grads, preds


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_err: float
    per_param: dict

    def worst(self) -> str:
        if not self.per_param:
            return "no parameters"
        name = max(self.per_param, key=self.per_param.get)
        return f"{name}: {self.per_param[name]:.3e}"


def grad_check(
    model: RecurrentModel,
    inputs: np.ndarray,
    targets: np.ndarray,
    kind: str,
    h: float = 1e-5,
    tol: float = 1e-4,
    node_obs: np.ndarray | None = None,
    forcing: str | None = None,
    dt: float | None = None,
    analytic: dict | None = None,
) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    Relative error per element is |analytic - numeric| divided by
    max(1e-6, |analytic| + |numeric|); the report carries the maximum per
    parameter.  A model without parameters passes vacuously.
    """
    if not model.params:
        return GradCheckReport(True, 0.0, {})

    def eval_loss() -> float:
        preds, _ = forward_sequence(
            model, inputs, targets=targets, node_obs=node_obs, forcing=forcing, dt=dt
        )
        value, _ = loss(preds, np.asarray(targets, dtype=np.float64), kind)
        return value

    if analytic is None:
        _, analytic, _ = loss_and_grads(
            model, inputs, targets, kind, node_obs=node_obs, forcing=forcing, dt=dt
        )
    per_param: dict[str, float] = {}
    for name in sorted(model.params):
        theta = model.params[name]
        ga = analytic[name]
        worst = 0.0
        it = np.nditer(theta, flags=["multi_index"])
        while not it.finished:
            idx = it.multi_index
            keep = theta[idx]
            theta[idx] = keep + h
            up = eval_loss()
            theta[idx] = keep - h
            dn = eval_loss()
            theta[idx] = keep
            fd = (up - dn) / (2.0 * h)
            num = abs(float(ga[idx]) - fd)
            den = max(1e-6, abs(float(ga[idx])) + abs(fd))
            worst = max(worst, num / den)
            it.iternext()
        per_param[name] = worst
    max_err = max(per_param.values())
    return GradCheckReport(max_err < tol, max_err, per_param)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(
    model: RecurrentModel,
    path: str | Path,
    scaler=None,
    config: dict | None = None,
) -> None:
    """Self-describing JSON checkpoint: shapes, float64 parameters, scaler,
    and the graph fingerprint for graph models."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "arch": model.arch,
        "input_size": model.input_size,
        "hidden_size": model.hidden_size,
        "output_size": model.output_size,
        "forcing": model.forcing,
        "dt": model.dt,
        "graph_hash": model.graph_hash,
        "poi_nodes": None if model.poi_nodes is None else [int(k) for k in model.poi_nodes],
        "params": {
            k: {"shape": list(v.shape), "data": np.asarray(v, dtype=np.float64).ravel().tolist()}
            for k, v in model.params.items()
        },
        "scaler": None if scaler is None else scaler.to_dict(),
        "config": config,
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True), encoding="utf-8")


def load_checkpoint(
    path: str | Path,
    a_hat: np.ndarray | None = None,
    graph_hash: str | None = None,
):
    """Load a checkpoint; graph models require the adjacency and verify the
    stored graph fingerprint against ``graph_hash`` when both are present.

    Returns (model, scaler or None, config or None).
    """
    from .features import Scaler

    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a recognized checkpoint file")
    arch = payload["arch"]
    params = {
        k: np.array(spec["data"], dtype=np.float64).reshape(spec["shape"])
        for k, spec in payload["params"].items()
    }
    poi_nodes = payload.get("poi_nodes")
    if arch == "ctgrn":
        if a_hat is None:
            raise ValueError("loading a graph checkpoint requires the normalized adjacency")
        stored = payload.get("graph_hash")
        if stored is not None and graph_hash is not None and stored != graph_hash:
            raise ValueError(
                f"graph hash mismatch: checkpoint built for {stored[:12]}..., got {graph_hash[:12]}..."
            )
    model = RecurrentModel(
        arch=arch,
        input_size=int(payload["input_size"]),
        hidden_size=int(payload["hidden_size"]),
        output_size=int(payload["output_size"]),
        params=params,
        a_hat=a_hat if arch == "ctgrn" else None,
        poi_nodes=None if poi_nodes is None else np.array(poi_nodes, dtype=np.int64),
        graph_hash=payload.get("graph_hash"),
        forcing=payload.get("forcing", "off"),
        dt=float(payload.get("dt", 1.0)),
    )
    scaler = None if payload.get("scaler") is None else Scaler.from_dict(payload["scaler"])
    return model, scaler, payload.get("config")
