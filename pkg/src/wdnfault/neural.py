"""LSTM variational autoencoder written directly against numpy.

Architecture (sizes configurable, structure fixed)::

    window (T x 1) -> encoder LSTM (H) -> last hidden state -> dropout
        -> dense (H, leaky ReLU) -> mu (L), log-variance (L)
    z = mu + exp(logvar / 2) * eps
    z repeated T times -> decoder LSTM (H) -> per-step linear readout -> T x 1

Gates use the order input, forget, candidate, output.  Gradients are derived
by hand (backpropagation through time) and checked against finite
differences in the test suite.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np
from numba import njit

from .exceptions import EmptyTrainingSet, NaNLoss

CHECKPOINT_VERSION = 1

PARAM_NAMES = (
    "enc_Wx", "enc_Wh", "enc_b",
    "dense_W", "dense_b",
    "mu_W", "mu_b", "lv_W", "lv_b",
    "dec_Wx", "dec_Wh", "dec_b",
    "out_W", "out_b",
)


@dataclass(frozen=True)
class ModelConfig:
    timestep: int = 10
    hidden_size: int = 8
    latent_dim: int = 2
    beta: float = 0.1
    dropout: float = 0.1
    learning_rate: float = 0.001
    leaky_slope: float = 0.01
    output_activation: str = "linear"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8


def _he(rng, fan_in, shape):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class SeqModel:
    """Parameters, Adam state and RNG of one LSTM-VAE."""

    def __init__(self, config: ModelConfig | None = None, seed=None, params: dict | None = None):
        self.config = config or ModelConfig()
        self.rng = np.random.default_rng(seed)
        self.params = params if params is not None else self._init_params()
        self.adam_m = {k: np.zeros_like(v) for k, v in self.params.items()}
        self.adam_v = {k: np.zeros_like(v) for k, v in self.params.items()}
        self.adam_t = 0

    def _init_params(self) -> dict:
        c, rng = self.config, self.rng
        H, L = c.hidden_size, c.latent_dim
        p = {
            "enc_Wx": _he(rng, 1, (1, 4 * H)),
            "enc_Wh": _he(rng, H, (H, 4 * H)),
            "enc_b": np.zeros(4 * H),
            "dense_W": _he(rng, H, (H, H)),
            "dense_b": np.zeros(H),
            "mu_W": _he(rng, H, (H, L)),
            "mu_b": np.zeros(L),
            "lv_W": _he(rng, H, (H, L)),
            "lv_b": np.zeros(L),
            "dec_Wx": _he(rng, L, (L, 4 * H)),
            "dec_Wh": _he(rng, H, (H, 4 * H)),
            "dec_b": np.zeros(4 * H),
            "out_W": _he(rng, H, (H, 1)),
            "out_b": np.zeros(1),
        }
        p["enc_b"][H:2 * H] = 1.0
        p["dec_b"][H:2 * H] = 1.0
        return p

    @classmethod
    def zeros(cls, config: ModelConfig | None = None) -> "SeqModel":
        m = cls(config, seed=0)
        m.params = {k: np.zeros_like(v) for k, v in m.params.items()}
        return m

    def copy(self) -> "SeqModel":
        m = SeqModel(self.config, params={k: v.copy() for k, v in self.params.items()})
        m.rng = np.random.default_rng()
        m.rng.bit_generator.state = self.rng.bit_generator.state
        m.adam_m = {k: v.copy() for k, v in self.adam_m.items()}
        m.adam_v = {k: v.copy() for k, v in self.adam_v.items()}
        m.adam_t = self.adam_t
        return m

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.params.values())

    # -- checkpoints -------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "format": "wdnfault.lstm_vae",
            "version": CHECKPOINT_VERSION,
            "config": asdict(self.config),
            "params": {k: {"shape": list(v.shape), "data": v.ravel().tolist()} for k, v in self.params.items()},
            "adam": {
                "t": self.adam_t,
                "m": {k: v.ravel().tolist() for k, v in self.adam_m.items()},
                "v": {k: v.ravel().tolist() for k, v in self.adam_v.items()},
            },
            "rng_state": self.rng.bit_generator.state,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SeqModel":
        if d.get("format") != "wdnfault.lstm_vae" or d.get("version") != CHECKPOINT_VERSION:
            raise ValueError("not a supported LSTM-VAE checkpoint")
        params = {k: np.array(v["data"], dtype=float).reshape(v["shape"]) for k, v in d["params"].items()}
        m = cls(ModelConfig(**d["config"]), params=params)
        m.adam_t = int(d["adam"]["t"])
        m.adam_m = {k: np.array(v, dtype=float).reshape(params[k].shape) for k, v in d["adam"]["m"].items()}
        m.adam_v = {k: np.array(v, dtype=float).reshape(params[k].shape) for k, v in d["adam"]["v"].items()}
        m.rng.bit_generator.state = d["rng_state"]
        return m

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> "SeqModel":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


# -- LSTM cell -------------------------------------------------------------
# The recurrences run in numba: at these sizes (B=64, H=8) per-step numpy
# dispatch dominates the cost of training.

@njit(cache=True, inline="always")
def _sig(x):
    return 1.0 / (1.0 + np.exp(-x))


@njit(cache=True)
def _lstm_fwd_kernel(xw, Wh, b):
    T, B, H4 = xw.shape
    H = H4 // 4
    hs = np.zeros((T, B, H))
    cs = np.zeros((T, B, H))
    tcs = np.zeros((T, B, H))
    gates = np.zeros((T, B, H4))
    h = np.zeros((B, H))
    c = np.zeros((B, H))
    acc = np.empty(H4)
    for t in range(T):
        for i in range(B):
            for g in range(H4):
                acc[g] = xw[t, i, g] + b[g]
            for k in range(H):
                hk = h[i, k]
                for g in range(H4):
                    acc[g] += hk * Wh[k, g]
            for g in range(H4):
                if g < 2 * H or g >= 3 * H:
                    gates[t, i, g] = _sig(acc[g])
                else:
                    gates[t, i, g] = 2.0 * _sig(2.0 * acc[g]) - 1.0
            for k in range(H):
                cn = gates[t, i, H + k] * c[i, k] + gates[t, i, k] * gates[t, i, 2 * H + k]
                tc = 2.0 * _sig(2.0 * cn) - 1.0
                hh = gates[t, i, 3 * H + k] * tc
                cs[t, i, k] = cn
                tcs[t, i, k] = tc
                hs[t, i, k] = hh
                c[i, k] = cn
                h[i, k] = hh
    return hs, cs, tcs, gates


@njit(cache=True)
def _lstm_bwd_kernel(dhs, hs, cs, tcs, gates, Wh):
    T, B, H = dhs.shape
    dxw = np.zeros((T, B, 4 * H))
    dWh = np.zeros(Wh.shape)
    dh_next = np.zeros((B, H))
    dc_next = np.zeros((B, H))
    for t in range(T - 1, -1, -1):
        for i in range(B):
            for k in range(H):
                ig = gates[t, i, k]
                fg = gates[t, i, H + k]
                gg = gates[t, i, 2 * H + k]
                og = gates[t, i, 3 * H + k]
                tc = tcs[t, i, k]
                cp = cs[t - 1, i, k] if t > 0 else 0.0
                dh = dhs[t, i, k] + dh_next[i, k]
                dc = dc_next[i, k] + dh * og * (1.0 - tc * tc)
                dxw[t, i, k] = dc * gg * ig * (1.0 - ig)
                dxw[t, i, H + k] = dc * cp * fg * (1.0 - fg)
                dxw[t, i, 2 * H + k] = dc * ig * (1.0 - gg * gg)
                dxw[t, i, 3 * H + k] = dh * tc * og * (1.0 - og)
                dc_next[i, k] = dc * fg
        if t > 0:
            for i in range(B):
                for k in range(H):
                    hk = hs[t - 1, i, k]
                    for g in range(4 * H):
                        dWh[k, g] += hk * dxw[t, i, g]
        for i in range(B):
            for k in range(H):
                acc = 0.0
                for g in range(4 * H):
                    acc += dxw[t, i, g] * Wh[k, g]
                dh_next[i, k] = acc
    return dxw, dWh


def lstm_forward(xw: np.ndarray, Wh: np.ndarray, b: np.ndarray):
    """Run an LSTM given the input projections ``xw`` of shape (T, B, 4H).

    Returns the hidden states (T, B, H) and a cache for :func:`lstm_backward`.
    """
    xw = np.ascontiguousarray(xw, dtype=np.float64)
    hs, cs, tcs, gates = _lstm_fwd_kernel(xw, np.ascontiguousarray(Wh), np.ascontiguousarray(b))
    return hs, (hs, cs, tcs, gates, Wh)


def lstm_backward(dhs: np.ndarray, cache):
    """Backpropagate ``dhs`` (T, B, H); returns (d_xw, dWh, db)."""
    hs, cs, tcs, gates, Wh = cache
    dxw, dWh = _lstm_bwd_kernel(np.ascontiguousarray(dhs), hs, cs, tcs, gates, np.ascontiguousarray(Wh))
    return dxw, dWh, dxw.sum(axis=(0, 1))


# -- full model --------------------------------------------------------------

def _forward(model: SeqModel, X: np.ndarray, train: bool, eps=None, mask=None):
    c, p = model.config, model.params
    X = np.asarray(X, dtype=float)
    B, T = X.shape
    H, L = c.hidden_size, c.latent_dim
    xs = X.T[:, :, None]  # (T, B, 1)
    enc_xw = xs @ p["enc_Wx"]
    enc_hs, enc_cache = lstm_forward(enc_xw, p["enc_Wh"], p["enc_b"])
    h_last = enc_hs[-1]
    if train and c.dropout > 0:
        if mask is None:
            keep = model.rng.random((B, H)) >= c.dropout
            mask = keep / (1.0 - c.dropout)
    else:
        mask = None
    hd = h_last * mask if mask is not None else h_last
    a_pre = hd @ p["dense_W"] + p["dense_b"]
    a = np.where(a_pre > 0, a_pre, c.leaky_slope * a_pre)
    mu = a @ p["mu_W"] + p["mu_b"]
    lv = a @ p["lv_W"] + p["lv_b"]
    if train:
        if eps is None:
            eps = model.rng.standard_normal((B, L))
        std = np.exp(0.5 * lv)
        z = mu + std * eps
    else:
        eps, std = np.zeros((B, L)), np.exp(0.5 * lv)
        z = mu.copy()
    dec_xw = np.broadcast_to(z @ p["dec_Wx"], (T, B, 4 * H))
    dec_hs, dec_cache = lstm_forward(dec_xw, p["dec_Wh"], p["dec_b"])
    raw = (dec_hs @ p["out_W"])[:, :, 0].T + p["out_b"][0]  # (B, T)
    if c.output_activation == "softmax":
        e = np.exp(raw - raw.max(axis=1, keepdims=True))
        recon = e / e.sum(axis=1, keepdims=True)
    else:
        recon = raw
    cache = dict(X=X, xs=xs, enc_cache=enc_cache, h_last=h_last, mask=mask, hd=hd,
                 a_pre=a_pre, a=a, mu=mu, lv=lv, eps=eps, std=std, z=z,
                 dec_hs=dec_hs, dec_cache=dec_cache, recon=recon)
    return recon, mu, lv, z, cache


def forward(model: SeqModel, w, mode: str = "eval", eps=None, mask=None):
    """Forward pass on one window (T,) or a batch (B, T).

    ``mode`` is ``"train"`` (sampled latent, dropout) or ``"eval"``
    (z = mu, no dropout).  Returns (reconstruction, mu, logvar, z).
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    w = np.asarray(w, dtype=float)
    single = w.ndim == 1
    recon, mu, lv, z, _ = _forward(model, w[None] if single else w, mode == "train", eps, mask)
    if single:
        return recon[0], mu[0], lv[0], z[0]
    return recon, mu, lv, z


def loss(x, x_hat, mu, logvar, beta: float):
    """Per-window (total, reconstruction MSE, KL) for single windows or batches."""
    x, x_hat = np.asarray(x, dtype=float), np.asarray(x_hat, dtype=float)
    mu, logvar = np.asarray(mu, dtype=float), np.asarray(logvar, dtype=float)
    if x.shape != x_hat.shape:
        raise ValueError("x and x_hat shapes differ")
    recon = np.mean((x - x_hat) ** 2, axis=-1)
    kl = -0.5 * np.sum(1.0 + logvar - mu**2 - np.exp(logvar), axis=-1)
    return recon + beta * kl, recon, kl


def _backward(model: SeqModel, cache) -> dict:
    """Gradient of the batch-mean total loss with respect to every parameter."""
    c, p = model.config, model.params
    X, recon = cache["X"], cache["recon"]
    B, T = X.shape
    grads = {}
    d_recon = 2.0 * (recon - X) / (T * B)
    if c.output_activation == "softmax":
        d_raw = recon * (d_recon - (d_recon * recon).sum(axis=1, keepdims=True))
    else:
        d_raw = d_recon
    dy = d_raw.T[:, :, None]  # (T, B, 1)
    dec_hs = cache["dec_hs"]
    grads["out_W"] = np.einsum("tbh,tbo->ho", dec_hs, dy)
    grads["out_b"] = np.array([d_raw.sum()])
    d_dec_hs = dy @ p["out_W"].T
    d_dec_xw, grads["dec_Wh"], grads["dec_b"] = lstm_backward(d_dec_hs, cache["dec_cache"])
    d_zw = d_dec_xw.sum(axis=0)  # same input at every step
    z = cache["z"]
    grads["dec_Wx"] = z.T @ d_zw
    dz = d_zw @ p["dec_Wx"].T
    mu, lv, eps, std = cache["mu"], cache["lv"], cache["eps"], cache["std"]
    dmu = dz + c.beta * mu / B
    dlv = dz * eps * 0.5 * std - c.beta * 0.5 * (1.0 - np.exp(lv)) / B
    a, a_pre = cache["a"], cache["a_pre"]
    grads["mu_W"] = a.T @ dmu
    grads["mu_b"] = dmu.sum(axis=0)
    grads["lv_W"] = a.T @ dlv
    grads["lv_b"] = dlv.sum(axis=0)
    da = dmu @ p["mu_W"].T + dlv @ p["lv_W"].T
    da_pre = da * np.where(a_pre > 0, 1.0, c.leaky_slope)
    grads["dense_W"] = cache["hd"].T @ da_pre
    grads["dense_b"] = da_pre.sum(axis=0)
    dhd = da_pre @ p["dense_W"].T
    dh_last = dhd * cache["mask"] if cache["mask"] is not None else dhd
    enc_dhs = np.zeros((T, B, c.hidden_size))
    enc_dhs[-1] = dh_last
    d_enc_xw, grads["enc_Wh"], grads["enc_b"] = lstm_backward(enc_dhs, cache["enc_cache"])
    grads["enc_Wx"] = np.einsum("tbi,tbg->ig", cache["xs"], d_enc_xw)
    return grads


def loss_and_grads(model: SeqModel, X, eps=None, mask=None, train: bool = True):
    """Batch-mean total loss and its gradient; ``eps``/``mask`` pin the randomness."""
    X = np.asarray(X, dtype=float)
    recon, mu, lv, z, cache = _forward(model, X, train, eps, mask)
    total, _, _ = loss(X, recon, mu, lv, model.config.beta)
    return float(total.mean()), _backward(model, cache)


def adam_step(model: SeqModel, grads: dict) -> None:
    c = model.config
    model.adam_t += 1
    b1, b2 = c.adam_beta1, c.adam_beta2
    lr_t = c.learning_rate * np.sqrt(1.0 - b2**model.adam_t) / (1.0 - b1**model.adam_t)
    for k, g in grads.items():
        m = model.adam_m[k]
        v = model.adam_v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        model.params[k] -= lr_t * m / (np.sqrt(v) + c.adam_eps)


def window_losses(model: SeqModel, windows) -> np.ndarray:
    """Eval-mode total loss of each window."""
    W = np.atleast_2d(np.asarray(windows, dtype=float))
    recon, mu, lv, _, _ = _forward(model, W, train=False)
    return loss(W, recon, mu, lv, model.config.beta)[0]


def score_and_encode(model: SeqModel, windows):
    """Eval-mode loss and latent mean for a batch of windows."""
    W = np.atleast_2d(np.asarray(windows, dtype=float))
    recon, mu, lv, _, _ = _forward(model, W, train=False)
    return loss(W, recon, mu, lv, model.config.beta)[0], mu


def encode(model: SeqModel, w) -> np.ndarray:
    return forward(model, w, "eval")[1]


def train(model: SeqModel, windows, epochs: int = 100, batch_size: int = 64, history: list | None = None):
    """Mini-batch Adam on the batch-mean loss; returns (model, final per-window losses).

    ``model`` is updated in place.  If ``history`` is a list, the mean
    eval-mode loss is appended before training and after every epoch.
    """
    W = np.asarray(windows, dtype=float)
    if W.ndim != 2 or len(W) == 0:
        raise EmptyTrainingSet("training needs at least one window")
    if W.shape[1] != model.config.timestep:
        raise ValueError(f"windows must have length {model.config.timestep}")
    n = len(W)
    if history is not None:
        history.append(float(window_losses(model, W).mean()))
    for epoch in range(epochs):
        order = model.rng.permutation(n)
        for bi, start in enumerate(range(0, n, batch_size)):
            batch = W[order[start:start + batch_size]]
            value, grads = loss_and_grads(model, batch)
            if not np.isfinite(value):
                raise NaNLoss(epoch, bi)
            adam_step(model, grads)
        if history is not None:
            history.append(float(window_losses(model, W).mean()))
    final = window_losses(model, W)
    if not np.all(np.isfinite(final)):
        raise NaNLoss(epochs, -1)
    return model, final


def make_windows(series, timestep: int = 10) -> np.ndarray:
    """All length-``timestep`` sliding windows (most recent value last)."""
    s = np.asarray(series, dtype=float)
    if len(s) < timestep:
        return np.empty((0, timestep))
    return np.lib.stride_tricks.sliding_window_view(s, timestep).copy()
