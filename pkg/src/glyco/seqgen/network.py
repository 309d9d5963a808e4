"""Encoder-decoder transformer blocks on top of :mod:`glyco.diffnum`.

Parameter names are dotted paths: ``enc.*`` is the history encoder, ``out.*``
the outcome decoder and ``trt.*`` the treatment decoder.  Layers are post-norm
as in the original transformer; feed-forward and embedding hidden layers use
tanh so every block is smooth (finite differences behave).
"""

from __future__ import annotations

import math

import numpy as np

from .. import diffnum as dn
from ..diffnum import Tensor
from .config import ModelConfig

N_HOURS = 25  # 24 clock hours plus the start-of-sequence token
START_HOUR = 24
NEG_INF = -1e9


def encoder_features(cfg: ModelConfig) -> int:
    return 2 * cfg.outcome_dim + cfg.treatment_dim + cfg.covariate_dim + cfg.static_dim


def outcome_features(cfg: ModelConfig) -> int:
    return cfg.treatment_dim + cfg.covariate_dim


def treatment_features(cfg: ModelConfig) -> int:
    return cfg.covariate_dim


def _dense(rng, fan_in, fan_out):
    return rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=(fan_in, fan_out)), np.zeros(fan_out)


def _attn_params(rng, prefix, d, out):
    for n in ("q", "k", "v", "o"):
        w, b = _dense(rng, d, d)
        out[f"{prefix}.w{n}"], out[f"{prefix}.b{n}"] = w, b


def _ln_params(prefix, d, out):
    out[f"{prefix}.g"] = np.ones(d)
    out[f"{prefix}.b"] = np.zeros(d)


def _mlp_params(rng, prefix, n_in, hidden, n_out, out):
    out[f"{prefix}.w1"], out[f"{prefix}.b1"] = _dense(rng, n_in, hidden)
    out[f"{prefix}.w2"], out[f"{prefix}.b2"] = _dense(rng, hidden, n_out)


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    d, L = cfg.d_model, cfg.latent_dim
    p: dict[str, np.ndarray] = {}
    _mlp_params(rng, "enc.embed", encoder_features(cfg), cfg.embed_hidden, d, p)
    p["enc.hour"] = rng.normal(0.0, 0.1, size=(N_HOURS, d))
    for i in range(cfg.enc_layers):
        _attn_params(rng, f"enc.l{i}.attn", d, p)
        _ln_params(f"enc.l{i}.ln1", d, p)
        _mlp_params(rng, f"enc.l{i}.ffn", d, cfg.ffn_hidden, d, p)
        _ln_params(f"enc.l{i}.ln2", d, p)
    p["enc.mu.w"], p["enc.mu.b"] = _dense(rng, d, L)
    p["enc.sd.w"], p["enc.sd.b"] = _dense(rng, d, L)
    p["enc.sd.b"][:] = -1.0
    for name, n_feat, n_out in (("out", outcome_features(cfg), cfg.outcome_dim),
                                ("trt", treatment_features(cfg), cfg.treatment_dim)):
        _mlp_params(rng, f"{name}.embed", n_feat, cfg.embed_hidden, d, p)
        p[f"{name}.hour"] = rng.normal(0.0, 0.1, size=(N_HOURS, d))
        p[f"{name}.zproj.w"], p[f"{name}.zproj.b"] = _dense(rng, L, d)
        for i in range(cfg.dec_layers):
            _attn_params(rng, f"{name}.l{i}.self", d, p)
            _ln_params(f"{name}.l{i}.ln1", d, p)
            _attn_params(rng, f"{name}.l{i}.cross", d, p)
            _ln_params(f"{name}.l{i}.ln2", d, p)
            _mlp_params(rng, f"{name}.l{i}.ffn", d, cfg.ffn_hidden, d, p)
            _ln_params(f"{name}.l{i}.ln3", d, p)
        p[f"{name}.head.w"], p[f"{name}.head.b"] = _dense(rng, d, n_out)
        p[f"{name}.head.w"] *= 0.1
    p["out.logsd"] = np.zeros((cfg.sd_rows, cfg.outcome_dim))
    return p


_PE_CACHE: dict[tuple[int, int], np.ndarray] = {}


def positional_encoding(length: int, d: int) -> np.ndarray:
    key = (length, d)
    if key not in _PE_CACHE:
        pos = np.arange(length)[:, None]
        div = np.exp(np.arange(0, d, 2) * (-math.log(10000.0) / d))
        pe = np.zeros((length, d))
        pe[:, 0::2] = np.sin(pos * div)
        pe[:, 1::2] = np.cos(pos * div)[:, : d // 2]
        _PE_CACHE[key] = pe
    return _PE_CACHE[key]


def linear(p, prefix, x: Tensor) -> Tensor:
    return x @ p[f"{prefix}.w"] + p[f"{prefix}.b"]


def mlp(p, prefix, x: Tensor) -> Tensor:
    h = dn.tanh(x @ p[f"{prefix}.w1"] + p[f"{prefix}.b1"])
    return h @ p[f"{prefix}.w2"] + p[f"{prefix}.b2"]


def layer_norm(p, prefix, x: Tensor) -> Tensor:
    return dn.layer_norm(x, p[f"{prefix}.g"], p[f"{prefix}.b"])


def attention(p, prefix, xq: Tensor, xkv: Tensor, allowed: np.ndarray, heads: int) -> Tensor:
    """Multi-head scaled dot-product attention.

    ``allowed`` is a boolean (B, Tq, Tk) array; False entries are masked out.
    """
    B, Tq, d = xq.shape
    Tk = xkv.shape[1]
    dh = d // heads

    def split(t, T):
        return dn.transpose(dn.reshape(t, (B, T, heads, dh)), (0, 2, 1, 3))

    q = split(xq @ p[f"{prefix}.wq"] + p[f"{prefix}.bq"], Tq)
    k = split(xkv @ p[f"{prefix}.wk"] + p[f"{prefix}.bk"], Tk)
    v = split(xkv @ p[f"{prefix}.wv"] + p[f"{prefix}.bv"], Tk)
    scores = dn.matmul(q, dn.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
    blocked = np.broadcast_to(~allowed[:, None, :, :], (B, heads, Tq, Tk))
    if blocked.any():
        scores = dn.masked_fill(scores, blocked, NEG_INF)
    weights = dn.softmax(scores, axis=-1)
    ctx = dn.reshape(dn.transpose(dn.matmul(weights, v), (0, 2, 1, 3)), (B, Tq, d))
    return ctx @ p[f"{prefix}.wo"] + p[f"{prefix}.bo"]


def embed(p, prefix, feats: np.ndarray, hours: np.ndarray, positional: bool = True) -> Tensor:
    B, T, _ = feats.shape
    d = p[f"{prefix}.hour"].shape[1]
    x = mlp(p, f"{prefix}.embed", dn.Tensor(feats))
    x = x + dn.embedding(p[f"{prefix}.hour"], hours)
    return x + positional_encoding(T, d) if positional else x


def run_encoder(p, cfg: ModelConfig, feats, hours, allowed) -> Tensor:
    x = embed(p, "enc", feats, hours)
    for i in range(cfg.enc_layers):
        x = layer_norm(p, f"enc.l{i}.ln1", x + attention(p, f"enc.l{i}.attn", x, x, allowed, cfg.heads))
        x = layer_norm(p, f"enc.l{i}.ln2", x + mlp(p, f"enc.l{i}.ffn", x))
    return x


def latent_heads(p, hidden: Tensor) -> tuple[Tensor, Tensor]:
    mu = linear(p, "enc.mu", hidden)
    sd = dn.softplus(linear(p, "enc.sd", hidden))
    return mu, sd


def run_decoder(p, cfg: ModelConfig, name: str, feats, hours, z: Tensor,
                self_allowed, cross_allowed) -> Tensor:
    # autoregressive decoder steps only see themselves; their clock position
    # comes from the hour embedding, so step losses do not depend on chunking
    x = embed(p, name, feats, hours, positional=cfg.mode != "autoregressive")
    mem = linear(p, f"{name}.zproj", z)
    for i in range(cfg.dec_layers):
        pre = f"{name}.l{i}"
        x = layer_norm(p, f"{pre}.ln1", x + attention(p, f"{pre}.self", x, x, self_allowed, cfg.heads))
        x = layer_norm(p, f"{pre}.ln2", x + attention(p, f"{pre}.cross", x, mem, cross_allowed, cfg.heads))
        x = layer_norm(p, f"{pre}.ln3", x + mlp(p, f"{pre}.ffn", x))
    return linear(p, f"{name}.head", x)


def as_tensors(arrays: dict[str, np.ndarray], requires_grad: bool = False) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=requires_grad, name=k) for k, v in arrays.items()}
