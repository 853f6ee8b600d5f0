"""Residual learning: feature sequences, a single-layer LSTM with BPTT, and blended models.

The network maps the history of ``xi = [u, u_e, Du/Dt]`` (six channels, no
position information) to an additive velocity correction in m/s on top of
the reduced drifter model.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .dynamics import DrifterParams, reduced_velocity
from .integrate import LEFT_DOMAIN, MASKED_FLOW, OK

log = logging.getLogger(__name__)

FEATURE_CHANNELS = ("u_east", "u_north", "ue_east", "ue_north", "dudt_east", "dudt_north")
N_INPUTS = len(FEATURE_CHANNELS)
N_OUTPUTS = 2
PARAM_NAMES = ("Wx", "Wh", "b", "Wd", "bd")
MODEL_FORMAT = "driftblend-lstm"
MODEL_VERSION = 1
STD_FLOOR = 1e-12


class ModelFormatError(ValueError):
    pass


# ---------------------------------------------------------------- features


@dataclass
class FeatureSequence:
    """Features and deterministic-model velocities sampled along one track."""

    drifter_id: str
    times: np.ndarray
    features: np.ndarray  # (n, 6); NaN rows where the flow is undefined
    valid: np.ndarray  # (n,) bool; False marks a coverage gap
    v_det: np.ndarray  # (n, 2) reduced-model velocity at the track positions
    v_real: np.ndarray  # (n, 2) observed velocity, NaN if unknown

    @property
    def target(self) -> np.ndarray:
        return self.v_real - self.v_det

    @property
    def gaps(self) -> np.ndarray:
        return np.flatnonzero(~self.valid)


def features_from_sample(sample) -> np.ndarray:
    return np.concatenate([sample.u, sample.u_e, sample.dudt], axis=-1)


def build_features(track, flow, params: DrifterParams) -> FeatureSequence:
    """Sample ``xi`` at the observed positions and times of ``track``."""
    sample = flow.sample(track.lon, track.lat, track.times)
    feats = features_from_sample(sample)
    valid = np.asarray(sample.valid, dtype=bool) & np.isfinite(feats).all(axis=1)
    feats = np.where(valid[:, None], feats, np.nan)
    v_det = np.where(valid[:, None], reduced_velocity(sample, params), np.nan)
    v_real = np.stack([np.asarray(track.u, dtype=np.float64), np.asarray(track.v, dtype=np.float64)], axis=-1)
    if (~valid).any():
        log.debug("track %s: %d samples outside field coverage", track.drifter_id, int((~valid).sum()))
    return FeatureSequence(str(track.drifter_id), np.asarray(track.times, dtype=np.float64), feats, valid, v_det, v_real)


# ---------------------------------------------------------------- model


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass
class Normalization:
    x_mean: np.ndarray
    x_std: np.ndarray
    y_mean: np.ndarray
    y_std: np.ndarray

    @classmethod
    def identity(cls, n_in=N_INPUTS, n_out=N_OUTPUTS):
        return cls(np.zeros(n_in), np.ones(n_in), np.zeros(n_out), np.ones(n_out))

    @classmethod
    def fit(cls, x: np.ndarray, y: np.ndarray) -> "Normalization":
        """z-score statistics from rows of ``x`` and ``y`` (NaN rows ignored)."""
        x = x[np.isfinite(x).all(axis=1)]
        y = y[np.isfinite(y).all(axis=1)]
        if x.size == 0 or y.size == 0:
            raise ValueError("no finite samples to fit normalization")
        xs, ys = x.std(axis=0), y.std(axis=0)
        for name, s in (("input", xs), ("target", ys)):
            small = s < STD_FLOOR
            if small.any():
                log.warning("%s channels %s are constant; std floored at %g", name, np.flatnonzero(small).tolist(), STD_FLOOR)
        return cls(x.mean(axis=0), np.maximum(xs, STD_FLOOR), y.mean(axis=0), np.maximum(ys, STD_FLOOR))

    def norm_x(self, x):
        return (x - self.x_mean) / self.x_std

    def denorm_x(self, z):
        return z * self.x_std + self.x_mean

    def norm_y(self, y):
        return (y - self.y_mean) / self.y_std

    def denorm_y(self, z):
        return z * self.y_std + self.y_mean


@dataclass
class LstmModel:
    Wx: np.ndarray  # (4H, n_in); gate blocks ordered input, forget, cell, output
    Wh: np.ndarray  # (4H, H)
    b: np.ndarray  # (4H,)
    Wd: np.ndarray  # (n_out, H)
    bd: np.ndarray  # (n_out,)
    norm: Normalization = field(default_factory=Normalization.identity)
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        H = self.hidden
        n_in = self.Wx.shape[1]
        shapes = {"Wx": (4 * H, n_in), "Wh": (4 * H, H), "b": (4 * H,), "Wd": (self.bd.shape[0], H)}
        for k, shp in shapes.items():
            if getattr(self, k).shape != shp:
                raise ModelFormatError(f"{k} has shape {getattr(self, k).shape}, expected {shp}")
        if self.norm.x_mean.shape != (n_in,) or self.norm.y_mean.shape != self.bd.shape:
            raise ModelFormatError("normalization shapes do not match the network")
        if np.any(self.norm.x_std <= 0) or np.any(self.norm.y_std <= 0):
            raise ModelFormatError("normalization std must be positive")

    @property
    def hidden(self) -> int:
        return self.Wh.shape[1]

    @property
    def n_inputs(self) -> int:
        return self.Wx.shape[1]

    @classmethod
    def initialize(cls, hidden=200, seed=0, n_in=N_INPUTS, n_out=N_OUTPUTS, norm=None, config=None):
        """Uniform(-1/sqrt(H), 1/sqrt(H)) weights, forget-gate bias +1, zero output bias."""
        rng = np.random.default_rng(seed)
        k = 1.0 / math.sqrt(hidden)
        Wx = rng.uniform(-k, k, (4 * hidden, n_in))
        Wh = rng.uniform(-k, k, (4 * hidden, hidden))
        b = np.zeros(4 * hidden)
        b[hidden : 2 * hidden] = 1.0
        Wd = rng.uniform(-k, k, (n_out, hidden))
        bd = np.zeros(n_out)
        return cls(Wx, Wh, b, Wd, bd, norm or Normalization.identity(n_in, n_out), dict(config or {}))

    @classmethod
    def zeros(cls, hidden=200, n_in=N_INPUTS, n_out=N_OUTPUTS, norm=None):
        """A network whose output is exactly the denormalized zero (the target mean)."""
        return cls(
            np.zeros((4 * hidden, n_in)), np.zeros((4 * hidden, hidden)), np.zeros(4 * hidden),
            np.zeros((n_out, hidden)), np.zeros(n_out), norm or Normalization.identity(n_in, n_out),
        )

    def params(self) -> dict:
        return {k: getattr(self, k) for k in PARAM_NAMES}

    def copy(self) -> "LstmModel":
        return LstmModel(
            *(getattr(self, k).copy() for k in PARAM_NAMES),
            norm=Normalization(*(a.copy() for a in asdict(self.norm).values())),
            config=dict(self.config),
        )

    def zero_state(self, batch: int):
        return np.zeros((batch, self.hidden)), np.zeros((batch, self.hidden))

    def step(self, x_norm, state):
        """Advance one time step; ``x_norm`` is ``(B, n_in)``. Returns ``(y_norm, state)``."""
        h, c = state
        H = self.hidden
        a = x_norm @ self.Wx.T + h @ self.Wh.T + self.b
        i = _sigmoid(a[:, :H])
        f = _sigmoid(a[:, H : 2 * H])
        g = np.tanh(a[:, 2 * H : 3 * H])
        o = _sigmoid(a[:, 3 * H :])
        c = f * c + i * g
        h = o * np.tanh(c)
        return h @ self.Wd.T + self.bd, (h, c)


def lstm_forward(model: LstmModel, x_norm, state=None):
    """Run the network over a normalized sequence.

    ``x_norm`` is ``(T, n_in)`` or ``(T, B, n_in)``. Returns velocity outputs
    in m/s with matching leading shape and the final ``(h, c)``.
    """
    x = np.asarray(x_norm, dtype=np.float64)
    squeeze = x.ndim == 2
    if squeeze:
        x = x[:, None, :]
    if x.ndim != 3 or x.shape[2] != model.n_inputs:
        raise ValueError(f"expected inputs (..., {model.n_inputs}), got {np.shape(x_norm)}")
    T, B, _ = x.shape
    if state is None:
        state = model.zero_state(B)
    out = np.empty((T, B, model.bd.shape[0]))
    for t in range(T):
        y, state = model.step(x[t], state)
        out[t] = y
    out = model.norm.denorm_y(out)
    return (out[:, 0] if squeeze else out), state


def lstm_gradients(model: LstmModel, x_norm, y_norm, mask=None, state=None):
    """Mean squared error in normalized target space and its exact BPTT gradients.

    ``x_norm`` (T, B, n_in), ``y_norm`` (T, B, n_out), ``mask`` (T, B) weights
    each step (1 = counted). Returns ``(grads, loss, final_state)``; gradients
    do not flow into the initial ``state``.
    """
    x = np.asarray(x_norm, dtype=np.float64)
    y = np.asarray(y_norm, dtype=np.float64)
    T, B, _ = x.shape
    H = model.hidden
    n_out = model.bd.shape[0]
    m = np.ones((T, B)) if mask is None else np.asarray(mask, dtype=np.float64)
    count = m.sum()
    grads = {k: np.zeros_like(v) for k, v in model.params().items()}
    if state is None:
        state = model.zero_state(B)
    if count == 0:
        return grads, 0.0, state

    h0, c0 = state
    hs = np.empty((T + 1, B, H))
    cs = np.empty((T + 1, B, H))
    gates = np.empty((T, B, 4 * H))
    hs[0], cs[0] = h0, c0
    for t in range(T):
        a = x[t] @ model.Wx.T + hs[t] @ model.Wh.T + model.b
        act = np.empty_like(a)
        act[:, :H] = _sigmoid(a[:, :H])
        act[:, H : 2 * H] = _sigmoid(a[:, H : 2 * H])
        act[:, 2 * H : 3 * H] = np.tanh(a[:, 2 * H : 3 * H])
        act[:, 3 * H :] = _sigmoid(a[:, 3 * H :])
        gates[t] = act
        cs[t + 1] = act[:, H : 2 * H] * cs[t] + act[:, :H] * act[:, 2 * H : 3 * H]
        hs[t + 1] = act[:, 3 * H :] * np.tanh(cs[t + 1])
    pred = hs[1:] @ model.Wd.T + model.bd
    err = (pred - y) * m[..., None]
    err = np.where(m[..., None] > 0, err, 0.0)
    loss = float((err * err).sum() / (n_out * count))
    dy = 2.0 * err / (n_out * count)

    grads["Wd"] = np.einsum("tbo,tbh->oh", dy, hs[1:])
    grads["bd"] = dy.sum(axis=(0, 1))
    dh_next = np.zeros((B, H))
    dc_next = np.zeros((B, H))
    da = np.empty((T, B, 4 * H))
    for t in range(T - 1, -1, -1):
        act = gates[t]
        i, f, g, o = act[:, :H], act[:, H : 2 * H], act[:, 2 * H : 3 * H], act[:, 3 * H :]
        tc = np.tanh(cs[t + 1])
        dh = dy[t] @ model.Wd + dh_next
        dc = dh * o * (1.0 - tc * tc) + dc_next
        da[t, :, :H] = dc * g * i * (1.0 - i)
        da[t, :, H : 2 * H] = dc * cs[t] * f * (1.0 - f)
        da[t, :, 2 * H : 3 * H] = dc * i * (1.0 - g * g)
        da[t, :, 3 * H :] = dh * tc * o * (1.0 - o)
        dc_next = dc * f
        dh_next = da[t] @ model.Wh
    grads["Wx"] = np.einsum("tbg,tbi->gi", da, x)
    grads["Wh"] = np.einsum("tbg,tbh->gh", da, hs[:-1])
    grads["b"] = da.sum(axis=(0, 1))
    return grads, loss, (hs[T], cs[T])


# ---------------------------------------------------------------- training


@dataclass
class TrainConfig:
    hidden: int = 200
    epochs: int = 100
    tau: float = 900.0
    truncation: int = 192
    learning_rate: float = 1e-3
    batch_size: int = 32
    rng_seed: int = 0
    clip_norm: float = 5.0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if k != "rng_seed" and not v > 0:
                raise ValueError(f"TrainConfig.{k} must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainingSample:
    """One training sequence: normalized-space ready features and residual targets."""

    drifter_id: str
    features: np.ndarray  # (n, 6) in physical units, NaN at gaps
    target: np.ndarray  # (n, 2) m/s, NaN where unknown

    @classmethod
    def from_sequence(cls, seq: FeatureSequence) -> "TrainingSample":
        return cls(seq.drifter_id, seq.features, seq.target)


class Adam:
    def __init__(self, params: dict, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def update(self, params: dict, grads: dict):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        corr = math.sqrt(1.0 - b2**self.t) / (1.0 - b1**self.t)
        for k in sorted(params):
            g = grads[k]
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * g
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * g * g
            params[k] -= self.lr * corr * self.m[k] / (np.sqrt(self.v[k]) + self.eps)


def clip_gradients(grads: dict, max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(grads[k] * grads[k])) for k in sorted(grads)))
    if total > max_norm:
        scale = max_norm / total
        for k in grads:
            grads[k] *= scale
    return total


def _pad_batch(samples, norm: Normalization):
    T = max(len(s.features) for s in samples)
    B = len(samples)
    x = np.zeros((T, B, N_INPUTS))
    y = np.zeros((T, B, N_OUTPUTS))
    m = np.zeros((T, B))
    for j, s in enumerate(samples):
        n = len(s.features)
        fx = norm.norm_x(s.features)
        fy = norm.norm_y(s.target)
        okx = np.isfinite(fx).all(axis=1)
        oky = np.isfinite(fy).all(axis=1)
        x[:n, j] = np.where(okx[:, None], fx, 0.0)
        y[:n, j] = np.where(oky[:, None], fy, 0.0)
        m[:n, j] = (okx & oky).astype(np.float64)
    return x, y, m


def train(samples, config: TrainConfig, callback=None):
    """Fit the residual network with Adam over stateful truncated BPTT windows.

    Each epoch shuffles the tracks, groups them into batches of
    ``config.batch_size`` tracks and walks each batch in windows of
    ``config.truncation`` steps, carrying the recurrent state between windows.
    Returns ``(model, epoch_losses)``.
    """
    samples = sorted(samples, key=lambda s: s.drifter_id)
    if not samples:
        raise ValueError("empty training set")
    norm = Normalization.fit(
        np.concatenate([s.features for s in samples]), np.concatenate([s.target for s in samples])
    )
    model = LstmModel.initialize(config.hidden, seed=config.rng_seed, norm=norm, config=config.to_dict())
    params = model.params()
    opt = Adam(params, lr=config.learning_rate)
    rng = np.random.default_rng(config.rng_seed + 1)
    history = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(samples))
        total, weight = 0.0, 0.0
        for start in range(0, len(order), config.batch_size):
            batch = [samples[i] for i in order[start : start + config.batch_size]]
            x, y, m = _pad_batch(batch, norm)
            state = model.zero_state(len(batch))
            for w0 in range(0, x.shape[0], config.truncation):
                w1 = w0 + config.truncation
                mw = m[w0:w1]
                grads, loss, state = lstm_gradients(model, x[w0:w1], y[w0:w1], mw, state)
                cnt = float(mw.sum())
                if cnt == 0:
                    continue
                clip_gradients(grads, config.clip_norm)
                opt.update(params, grads)
                total += loss * cnt
                weight += cnt
        epoch_loss = total / weight if weight else 0.0
        history.append(epoch_loss)
        log.info("epoch %d/%d loss %.6g", epoch + 1, config.epochs, epoch_loss)
        if callback is not None:
            callback(epoch, epoch_loss)
    return model, history


def predict_residual(model: LstmModel, features: np.ndarray) -> np.ndarray:
    """Run the network along one feature sequence (gaps fed as the mean input)."""
    z = model.norm.norm_x(np.asarray(features, dtype=np.float64))
    z = np.where(np.isfinite(z).all(axis=1)[:, None], z, 0.0)
    out, _ = lstm_forward(model, z)
    return out


# ---------------------------------------------------------------- blended models


class DeterministicModel:
    """Reduced drifter model on a flow context as an integrator velocity model."""

    def __init__(self, flow, params: DrifterParams, slip=None):
        self.flow = flow
        self.params = params
        self.slip = slip

    def __call__(self, lon, lat, t):
        sample = self.flow.sample(lon, lat, t)
        vel = reduced_velocity(sample, self.params, self.slip)
        status = np.where(sample.valid, OK, LEFT_DOMAIN).astype(np.int8)
        if sample.masked is not None:
            status[sample.masked] = MASKED_FLOW
        vel = np.where(sample.valid[:, None], vel, np.nan)
        return vel, status


class BlendedModel(DeterministicModel):
    """Reduced model plus LSTM correction, with one recurrent history per member.

    ``step_begin`` feeds each member's current ``xi`` to its own recurrent
    state; the resulting correction is held over the RK4 stages of the step.
    A member whose flow sample is invalid is fed the mean input.
    """

    def __init__(self, flow, params: DrifterParams, lstm: LstmModel | None):
        super().__init__(flow, params)
        self.lstm = lstm
        self.state = None
        self.correction = None
        self._last_t = None

    def reset(self):
        self.state = None
        self.correction = None
        self._last_t = None

    def step_begin(self, lon, lat, t, active=None):
        if self.lstm is None:
            return
        if self._last_t is not None and np.array_equal(t, self._last_t):
            return
        lon = np.atleast_1d(lon)
        if self.state is None or self.state[0].shape[0] != lon.size:
            self.state = self.lstm.zero_state(lon.size)
        sample = self.flow.sample(lon, lat, t)
        z = self.lstm.norm.norm_x(features_from_sample(sample))
        z = np.where(np.isfinite(z).all(axis=1)[:, None], z, 0.0)
        y, self.state = self.lstm.step(z, self.state)
        self.correction = self.lstm.norm.denorm_y(y)
        self._last_t = np.copy(t)

    def __call__(self, lon, lat, t):
        vel, status = super().__call__(lon, lat, t)
        if self.lstm is None or self.correction is None:
            return vel, status
        return vel + self.correction, status


def single_step_velocities(track, flow, params: DrifterParams, lstm: LstmModel | None):
    """Deterministic and blended velocities along the observed track positions."""
    seq = build_features(track, flow, params)
    if lstm is None:
        return seq, seq.v_det.copy(), seq.v_det.copy()
    return seq, seq.v_det.copy(), seq.v_det + predict_residual(lstm, seq.features)


def forecast_ensemble(flow, params: DrifterParams, lstm, starts, t0, n_steps, dt=900.0, ids=None):
    """Integrate an ensemble with the blended model (deterministic when ``lstm`` is None)."""
    from .integrate import integrate_ensemble

    model = BlendedModel(flow, params, lstm) if lstm is not None else DeterministicModel(flow, params)
    return integrate_ensemble(model, starts, t0, n_steps, dt, ids)


# ---------------------------------------------------------------- serialization


def _arr(a: np.ndarray) -> dict:
    return {"shape": list(a.shape), "data": [float(x) for x in np.ravel(a)]}


def _unarr(d) -> np.ndarray:
    try:
        return np.asarray(d["data"], dtype=np.float64).reshape(d["shape"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFormatError(f"bad array entry: {exc}") from exc


def model_to_dict(model: LstmModel) -> dict:
    return {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "hidden": model.hidden,
        "channels": list(FEATURE_CHANNELS),
        "outputs": ["du_east", "du_north"],
        "weights": {k: _arr(v) for k, v in model.params().items()},
        "normalization": {k: _arr(v) for k, v in asdict(model.norm).items()},
        "config": model.config,
    }


def model_from_dict(d: dict) -> LstmModel:
    if not isinstance(d, dict) or d.get("format") != MODEL_FORMAT:
        raise ModelFormatError("not a driftblend LSTM model")
    if d.get("version") != MODEL_VERSION:
        raise ModelFormatError(f"unsupported model version {d.get('version')!r}")
    try:
        w = {k: _unarr(d["weights"][k]) for k in PARAM_NAMES}
        n = d["normalization"]
        norm = Normalization(*(_unarr(n[k]) for k in ("x_mean", "x_std", "y_mean", "y_std")))
    except KeyError as exc:
        raise ModelFormatError(f"missing entry {exc}") from exc
    return LstmModel(**w, norm=norm, config=dict(d.get("config", {})))


def save_model(model: LstmModel, path, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    d = model_to_dict(model)
    if extra:
        d["provenance"] = extra
    path.write_text(json.dumps(d) + "\n")
    return path


def load_model(path) -> LstmModel:
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"{path}: {exc}") from exc
    return model_from_dict(d)


