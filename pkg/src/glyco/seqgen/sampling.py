"""Encoding, decoding and sampling for a single decision context.

:class:`Conditioner` encodes one context once and then answers batched
queries (outcome distributions for many candidate treatments, treatment
rates for many latent draws, autoregressive rollouts).  The module-level
functions are thin single-query wrappers around it.

Outcome distributions live in scaled units; ``sample_outcomes`` and friends
return mmol/L.  Treatments are always insulin units.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import diffnum as dn
from ..preprocess import ScalerParams
from ..trajectory import Context, Window
from .batching import (context_encoder_inputs, encoder_rows, outcome_rows, start_row,
                       treatment_rows, window_batch)
from .model import ModeError, ModelParams
from .network import START_HOUR, as_tensors, latent_heads, run_decoder, run_encoder
from .objectives import OutcomeDist, TreatmentDist

CHUNK = 1024


@dataclass(frozen=True)
class GaussianPosterior:
    """Diagonal Gaussian over latents; ``mean`` and ``sd`` are L x n."""

    mean: object
    sd: object

    def __post_init__(self):
        sd = self.sd.data if isinstance(self.sd, dn.Tensor) else np.asarray(self.sd)
        if not np.all(sd > 0):
            raise ValueError("posterior sds must be strictly positive")


def sample_latent(posterior: GaussianPosterior, rng: np.random.Generator, eps=None):
    """Reparametrised draw ``mean + sd * eps``; works on arrays and on tensors.

    With tensors the result stays on the tape, so gradients reach both the
    mean and the sd.  ``eps`` may carry extra leading sample axes.
    """
    shape = posterior.mean.shape
    noise = rng.standard_normal(shape) if eps is None else np.asarray(eps)
    return posterior.mean + posterior.sd * noise


def poisson_mode(rate) -> np.ndarray:
    """Largest mode of Poisson(rate): ``ceil(rate) - 1``, i.e. floor(rate) except at
    integer rates where the tie {rate-1, rate} is broken downward."""
    return np.maximum(np.ceil(np.asarray(rate, dtype=float)) - 1.0, 0.0)


def _unscale_y(values, scaler: ScalerParams):
    return values * scaler.outcome_sd + scaler.outcome_mean


class Conditioner:
    """A model bound to one context.

    Non-autoregressive modes run the encoder once at construction.  In
    autoregressive mode the raw history (last ``history`` steps) is kept and
    re-encoded after every generated step.
    """

    def __init__(self, ctx: Context, params: ModelParams, require_trained: bool = True):
        if require_trained:
            params.require_trained()
        cfg = params.config
        if ctx.K != cfg.K and cfg.mode != "autoregressive":
            raise ValueError(f"context horizon {ctx.K} does not match model K={cfg.K}")
        self.ctx, self.params, self.cfg, self.scaler = ctx, params, cfg, params.scaler
        self.K = ctx.K
        self.p = as_tensors(params.arrays)
        self.v = np.asarray(ctx.future_covariates, dtype=float)
        self.hours = np.asarray(ctx.future_hours, dtype=int)
        self.sd = np.exp(params.arrays["out.logsd"]).T  # (P, sd_rows)
        if cfg.mode == "autoregressive":
            H = cfg.history
            lo = max(0, ctx.past_length - H)
            self._hist = {
                "y": np.asarray(ctx.past_outcomes[:, lo:], dtype=float),
                "m": np.asarray(ctx.past_mask[:, lo:], dtype=float),
                "x": np.asarray(ctx.past_treatments[:, lo:], dtype=float),
                "v": np.asarray(ctx.past_covariates[:, lo:], dtype=float),
                "h": np.asarray(ctx.past_hours[lo:], dtype=int),
            }
            self._start = start_row(ctx.static_features, self.scaler, cfg)
            rows, hours = context_encoder_inputs(ctx, self.scaler, cfg, start_token=True)
        else:
            rows, hours = context_encoder_inputs(ctx, self.scaler, cfg)
        n = rows.shape[0]
        self.n_latent = n
        if cfg.mode == "autoregressive":
            allowed = np.tril(np.ones((1, n, n), dtype=bool))
        else:
            # left-pad to the training layout so positional encodings line up
            pad = cfg.history - n
            rows = np.concatenate([np.zeros((pad, rows.shape[1])), rows])
            hours = np.concatenate([np.zeros(pad, dtype=int), hours])
            valid = np.arange(cfg.history) >= pad
            allowed = np.broadcast_to(valid, (1, cfg.history, cfg.history))
        with dn.no_grad():
            h = run_encoder(self.p, cfg, rows[None], hours[None], allowed)
            mu, sd = latent_heads(self.p, h)
        self.mu, self.post_sd = mu.data[0, -n:], sd.data[0, -n:]  # (n, L)

    # -- latent -----------------------------------------------------------------
    def posterior(self) -> GaussianPosterior:
        return GaussianPosterior(self.mu.T.copy(), self.post_sd.T.copy())

    def latent_draws(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """``n`` latent sequences (n, n_latent, L): posterior draws in latent mode, the mean otherwise."""
        if self.cfg.mode == "latent":
            return self.mu + self.post_sd * rng.standard_normal((n,) + self.mu.shape)
        return np.broadcast_to(self.mu, (n,) + self.mu.shape)

    # -- decoding (non-autoregressive) -----------------------------------------
    def _decode(self, name: str, feats: np.ndarray, z: np.ndarray) -> np.ndarray:
        N, K = feats.shape[:2]
        n = z.shape[1]
        out = []
        for s in range(0, N, CHUNK):
            f, zz = feats[s:s + CHUNK], z[s:s + CHUNK]
            b = f.shape[0]
            with dn.no_grad():
                head = run_decoder(self.p, self.cfg, name, f, np.broadcast_to(self.hours, (b, K)),
                                   dn.Tensor(zz), np.ones((b, K, K), dtype=bool), np.ones((b, K, n), dtype=bool))
            out.append(head.data)
        return np.concatenate(out)

    def outcome_mean(self, x_units: np.ndarray, z: np.ndarray | None = None) -> np.ndarray:
        """Scaled outcome means (N, P, K) for treatments (N, D, K) and latents (N, n, L)."""
        self._need_window_mode()
        x_units = np.asarray(x_units, dtype=float)
        N = x_units.shape[0]
        if z is None:
            z = np.broadcast_to(self.mu, (N,) + self.mu.shape)
        feats = outcome_rows(x_units, self.v, self.scaler, self.cfg)
        return np.swapaxes(self._decode("out", feats, z), 1, 2)

    def rates(self, z: np.ndarray | None = None) -> np.ndarray:
        """Poisson rates (N, D, K) for latents (N, n, L); default the posterior mean."""
        self._need_window_mode()
        if z is None:
            z = self.mu[None]
        feats = np.broadcast_to(treatment_rows(self.v, self.scaler, self.cfg), (z.shape[0], self.K, self.cfg.covariate_dim))
        return np.exp(np.swapaxes(self._decode("trt", feats, z), 1, 2))

    def _need_window_mode(self):
        if self.cfg.mode == "autoregressive":
            raise ModeError("window decoding is not available in autoregressive mode; use a rollout")

    # -- autoregressive rollout --------------------------------------------------
    def rollout(self, N: int, x_units: np.ndarray | None, rng: np.random.Generator | None,
                eps: np.ndarray | None = None, greedy: bool = False) -> tuple[np.ndarray, np.ndarray]:
        """Generate ``K`` steps for ``N`` parallel sequences.

        If ``x_units`` (N, D, K) is given, treatments are fixed and only
        outcomes are sampled; otherwise treatments are drawn from the Poisson
        head (or its mode when ``greedy``).  ``eps`` (N, P, K) fixes the
        outcome noise; ``greedy`` uses the outcome mean.  Returns raw
        outcomes (N, P, K) and treatments (N, D, K).
        """
        if self.cfg.mode != "autoregressive":
            raise ModeError("rollout needs an autoregressive model")
        cfg, sc, H, K = self.cfg, self.scaler, self.cfg.history, self.K
        hist = {k: np.broadcast_to(v, (N,) + v.shape).copy() if k != "h" else v.copy()
                for k, v in self._hist.items()}
        ys = np.zeros((N, cfg.outcome_dim, K))
        xs = np.zeros((N, cfg.treatment_dim, K))
        sd = self.sd[:, 0]
        for k in range(K):
            rows = encoder_rows(hist["y"], hist["m"], hist["x"], hist["v"], self.ctx.static_features, sc, cfg)
            rows = np.concatenate([np.broadcast_to(self._start, (N, 1, rows.shape[-1])), rows], axis=1)
            hours = np.concatenate([[START_HOUR], hist["h"]]).astype(int)
            n = rows.shape[1]
            v_k = self.v[:, k:k + 1]
            hour_k = self.hours[k:k + 1]
            if x_units is None:
                trt_f = np.broadcast_to(treatment_rows(v_k, sc, cfg), (N, 1, cfg.covariate_dim))
            step_x = np.zeros((N, cfg.treatment_dim))
            step_mu = np.zeros((N, cfg.outcome_dim))
            for s in range(0, N, CHUNK):
                sl = slice(s, min(N, s + CHUNK))
                b = sl.stop - sl.start
                with dn.no_grad():
                    hid = run_encoder(self.p, cfg, rows[sl], np.broadcast_to(hours, (b, n)),
                                      np.broadcast_to(np.tril(np.ones((n, n), dtype=bool)), (b, n, n)))
                    z, _ = latent_heads(self.p, hid)
                    ones_self = np.ones((b, 1, 1), dtype=bool)
                    ones_cross = np.ones((b, 1, n), dtype=bool)
                    hrs = np.broadcast_to(hour_k, (b, 1))
                    if x_units is None:
                        lr = run_decoder(self.p, cfg, "trt", trt_f[sl], hrs, z, ones_self, ones_cross).data[:, 0]
                        rate = np.exp(lr)
                        step_x[sl] = poisson_mode(rate) if greedy else rng.poisson(rate)
                    else:
                        step_x[sl] = x_units[sl, :, k]
                    of = outcome_rows(step_x[sl][:, :, None], v_k, sc, cfg)
                    step_mu[sl] = run_decoder(self.p, cfg, "out", of, hrs, z, ones_self, ones_cross).data[:, 0]
            if greedy:
                noise = np.zeros_like(step_mu)
            elif eps is not None:
                noise = eps[:, :, k]
            else:
                noise = rng.standard_normal(step_mu.shape)
            y_k = _unscale_y(step_mu + sd * noise, sc)
            ys[:, :, k], xs[:, :, k] = y_k, step_x
            hist["y"] = np.concatenate([hist["y"], y_k[:, :, None]], axis=2)[:, :, -H:]
            hist["m"] = np.concatenate([hist["m"], np.ones((N, cfg.outcome_dim, 1))], axis=2)[:, :, -H:]
            hist["x"] = np.concatenate([hist["x"], step_x[:, :, None]], axis=2)[:, :, -H:]
            hist["v"] = np.concatenate([hist["v"], np.broadcast_to(v_k, (N,) + v_k.shape)], axis=2)[:, :, -H:]
            hist["h"] = np.concatenate([hist["h"], hour_k])[-H:]
        return ys, xs

    # -- sampling --------------------------------------------------------------------
    def outcome_noise(self, S: int, rng: np.random.Generator) -> np.ndarray:
        return rng.standard_normal((S, self.cfg.outcome_dim, self.K))

    def sample_outcomes_crn(self, x_units: np.ndarray, S: int, rng: np.random.Generator) -> np.ndarray:
        """Outcome samples (U, S, P, K) in mmol/L for U candidate treatments.

        Every candidate sees the same latent draws and the same Gaussian noise
        (common random numbers), so score differences reflect the treatments.
        """
        x_units = np.asarray(x_units, dtype=float)
        U = x_units.shape[0]
        mode = self.cfg.mode
        if mode == "autoregressive":
            eps = self.outcome_noise(S, rng)
            xs = np.repeat(x_units, S, axis=0)
            ys, _ = self.rollout(U * S, xs, rng, eps=np.tile(eps, (U, 1, 1)))
            return ys.reshape(U, S, self.cfg.outcome_dim, self.K)
        sd = self.sd
        if mode == "parametric":
            eps = self.outcome_noise(S, rng)
            mean = self.outcome_mean(x_units)
            return _unscale_y(mean[:, None] + sd * eps[None], self.scaler)
        z = self.latent_draws(S, rng)
        eps = self.outcome_noise(S, rng)
        out = np.empty((U, S, self.cfg.outcome_dim, self.K))
        for u in range(U):
            mean = self.outcome_mean(np.broadcast_to(x_units[u], (S,) + x_units.shape[1:]), z)
            out[u] = _unscale_y(mean + sd * eps, self.scaler)
        return out

    def sample_outcomes(self, x_units: np.ndarray, S: int, rng: np.random.Generator) -> np.ndarray:
        return self.sample_outcomes_crn(np.asarray(x_units, dtype=float)[None], S, rng)[0]

    def sample_treatments(self, U: int, rng: np.random.Generator) -> np.ndarray:
        mode = self.cfg.mode
        if mode == "autoregressive":
            _, xs = self.rollout(U, None, rng)
            return xs.astype(np.int64)
        if mode == "parametric":
            rate = np.broadcast_to(self.rates()[0], (U, self.cfg.treatment_dim, self.K))
        else:
            rate = self.rates(self.latent_draws(U, rng))
        return rng.poisson(rate).astype(np.int64)

    def most_probable_treatment(self) -> np.ndarray:
        if self.cfg.mode == "autoregressive":
            _, xs = self.rollout(1, None, None, greedy=True)
            return xs[0].astype(np.int64)
        return poisson_mode(self.rates()[0]).astype(np.int64)


# -- single-query API --------------------------------------------------------------

def encode(ctx: Context, params: ModelParams):
    """Latent encoding of a context's history (L x n).

    Latent mode returns a :class:`GaussianPosterior`; the other modes return
    the deterministic mean head as an array.
    """
    c = Conditioner(ctx, params, require_trained=False)
    if params.config.mode == "latent":
        return c.posterior()
    return c.mu.T.copy()


def _z_rows(z, params: ModelParams) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    if z.ndim != 2 or z.shape[0] != params.config.latent_dim:
        raise ValueError(f"z must be L x n with L={params.config.latent_dim}")
    return z.T[None]


def _check_future(a, rows: int, K: int, what: str) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.shape != (rows, K):
        raise ValueError(f"{what} must have shape ({rows}, {K}), got {a.shape}")
    return a


def decode_outcome(x, v, z, params: ModelParams, future_hours=None) -> OutcomeDist:
    """Per-cell Gaussian (scaled) for scaled future treatments ``x`` (D x K) and carbs ``v`` (V x K)."""
    cfg = params.config
    K = np.shape(x)[-1]
    if cfg.mode != "autoregressive" and K != cfg.K:
        raise ValueError(f"expected K={cfg.K} future steps, got {K}")
    x = _check_future(x, cfg.treatment_dim, K, "x")
    v = _check_future(v, cfg.covariate_dim, K, "v")
    zz = _z_rows(z, params)
    hours = np.arange(K) % 24 if future_hours is None else np.asarray(future_hours, dtype=int)
    feats = outcome_rows(x, v, ScalerParams.identity(cfg.treatment_dim, cfg.static_dim), cfg)[None]
    n = zz.shape[1]
    allowed_self = np.ones((1, K, K), dtype=bool) if cfg.mode != "autoregressive" else np.eye(K, dtype=bool)[None]
    with dn.no_grad():
        mean = run_decoder(as_tensors(params.arrays), cfg, "out", feats, hours[None], dn.Tensor(zz),
                           allowed_self, np.ones((1, K, n), dtype=bool)).data[0].T
    sd_rows = np.arange(K) if cfg.mode != "autoregressive" else np.zeros(K, dtype=int)
    sd = np.exp(params.arrays["out.logsd"][sd_rows]).T
    return OutcomeDist(mean, sd)


def decode_treatment(v, z, params: ModelParams, future_hours=None) -> TreatmentDist:
    """Poisson rates (D x K) for scaled future carbs ``v`` (V x K)."""
    cfg = params.config
    K = np.shape(v)[-1]
    if cfg.mode != "autoregressive" and K != cfg.K:
        raise ValueError(f"expected K={cfg.K} future steps, got {K}")
    v = _check_future(v, cfg.covariate_dim, K, "v")
    zz = _z_rows(z, params)
    hours = np.arange(K) % 24 if future_hours is None else np.asarray(future_hours, dtype=int)
    feats = (v.T if "future-v" in cfg.include else np.zeros_like(v.T))[None]
    n = zz.shape[1]
    allowed_self = np.ones((1, K, K), dtype=bool) if cfg.mode != "autoregressive" else np.eye(K, dtype=bool)[None]
    with dn.no_grad():
        lr = run_decoder(as_tensors(params.arrays), cfg, "trt", feats, hours[None], dn.Tensor(zz),
                         allowed_self, np.ones((1, K, n), dtype=bool)).data[0].T
    return TreatmentDist(np.exp(lr))


def sample_outcomes(x_units, ctx: Context, params: ModelParams, S: int, rng: np.random.Generator) -> np.ndarray:
    """``S`` outcome trajectories (S x P x K, mmol/L) under treatment ``x_units`` (D x K)."""
    if S < 1:
        raise ValueError("S must be positive")
    return Conditioner(ctx, params).sample_outcomes(x_units, S, rng)


def sample_treatments(ctx: Context, params: ModelParams, U: int, rng: np.random.Generator) -> np.ndarray:
    """``U`` treatment trajectories (U x D x K), non-negative integer units."""
    if U < 1:
        raise ValueError("U must be positive")
    return Conditioner(ctx, params).sample_treatments(U, rng)


def most_probable_treatment(ctx: Context, params: ModelParams) -> np.ndarray:
    return Conditioner(ctx, params).most_probable_treatment()


# -- forecasting ------------------------------------------------------------------

def predict_windows(windows: list[Window], params: ModelParams, rng: np.random.Generator | None = None,
                    S: int = 100, batch: int = 256) -> np.ndarray:
    """Point forecasts (N x P x K, mmol/L) under each window's observed future treatments.

    Parametric mode returns the decoder mean; latent mode averages the mean
    over ``S`` posterior draws; autoregressive mode averages ``S`` rollouts.
    """
    params.require_trained()
    cfg, sc = params.config, params.scaler
    if cfg.mode == "autoregressive":
        out = []
        for w in windows:
            c = Conditioner(w.context, params)
            ys, _ = c.rollout(S, np.broadcast_to(w.future_treatments, (S,) + w.future_treatments.shape), rng)
            out.append(ys.mean(axis=0))
        return np.stack(out)
    p = as_tensors(params.arrays)
    out = []
    for s in range(0, len(windows), batch):
        b = window_batch(windows[s:s + batch], sc, cfg)
        with dn.no_grad():
            hid = run_encoder(p, cfg, b.enc_feat, b.enc_hours, b.enc_allowed)
            mu, sd = latent_heads(p, hid)
            draws = [mu.data] if cfg.mode == "parametric" else [
                mu.data + sd.data * rng.standard_normal(mu.shape) for _ in range(S)]
            acc = 0.0
            for z in draws:
                acc = acc + run_decoder(p, cfg, "out", b.out_feat, b.dec_hours, dn.Tensor(z),
                                        b.self_allowed, b.cross_allowed).data
        out.append(_unscale_y(np.swapaxes(acc / len(draws), 1, 2), sc))
    return np.concatenate(out)
