"""Log-likelihoods and the three training objectives.

All objectives return a scalar :class:`~glyco.diffnum.Tensor` (a loss to be
minimised) averaged over the windows or sequences of a batch.  Pass
``tensors`` to differentiate with respect to a dict of leaf tensors; by
default the arrays of ``params`` are used as constants.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

from .. import diffnum as dn
from ..diffnum import Tensor
from .batching import Batch
from .model import ModelParams
from .network import as_tensors, latent_heads, run_decoder, run_encoder

LOG_2PI = math.log(2.0 * math.pi)


class EmptyMaskWarning(UserWarning):
    """Outcome log-likelihood requested with no measured cell."""


@dataclass(frozen=True)
class OutcomeDist:
    """Per-cell Gaussian over scaled outcomes; ``mean`` and ``sd`` are P x K."""

    mean: np.ndarray
    sd: np.ndarray

    def __post_init__(self):
        if np.shape(self.mean) != np.shape(self.sd):
            raise ValueError("mean and sd shapes differ")
        if not np.all(np.asarray(self.sd) > 0):
            raise ValueError("outcome sds must be positive")


@dataclass(frozen=True)
class TreatmentDist:
    """Per-cell Poisson rates, D x K."""

    rate: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rate)
        if not (np.all(np.isfinite(r)) and np.all(r > 0)):
            raise ValueError("Poisson rates must be positive and finite")


def loglik_outcome(dist: OutcomeDist, y, mask) -> float:
    """Gaussian log-density summed over measured cells only.

    Unmeasured cells contribute exactly zero whatever ``y`` holds there.  An
    all-false mask returns 0.0 and emits :class:`EmptyMaskWarning`.
    """
    y = np.asarray(y, dtype=float)
    mask = np.asarray(mask, dtype=bool)
    if y.shape != dist.mean.shape or mask.shape != y.shape:
        raise ValueError(f"shape mismatch: y {y.shape}, mask {mask.shape}, dist {dist.mean.shape}")
    if not mask.any():
        warnings.warn("no measured outcome cell; log-likelihood is 0", EmptyMaskWarning, stacklevel=2)
        return 0.0
    mu, sd, yy = dist.mean[mask], dist.sd[mask], y[mask]
    r = (yy - mu) / sd
    return float(np.sum(-0.5 * LOG_2PI - np.log(sd) - 0.5 * r * r))


def _check_counts(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if np.any(x < 0) or np.any(x != np.round(x)) or not np.all(np.isfinite(x)):
        raise ValueError("treatment units must be non-negative integers")
    return x


def loglik_treatment(dist: TreatmentDist, x_units) -> float:
    """Poisson log-pmf summed over all cells, log-factorial via log-gamma."""
    x = _check_counts(x_units)
    if x.shape != np.shape(dist.rate):
        raise ValueError(f"shape mismatch: x {x.shape}, rate {np.shape(dist.rate)}")
    lam = np.asarray(dist.rate, dtype=float)
    return float(np.sum(x * np.log(lam) - lam - gammaln(x + 1.0)))


def kl_to_prior(mu, sd, prior_sd: float):
    """Closed-form KL of N(mu, sd^2) to N(0, prior_sd^2), elementwise (numpy)."""
    mu, sd = np.asarray(mu, dtype=float), np.asarray(sd, dtype=float)
    return np.log(prior_sd / sd) + (sd * sd + mu * mu) / (2.0 * prior_sd ** 2) - 0.5


# -- batched differentiable pieces ------------------------------------------------

def _tensors(params: ModelParams, tensors):
    return tensors if tensors is not None else as_tensors(params.arrays)


def encode_batch(p, cfg, batch: Batch) -> tuple[Tensor, Tensor]:
    hidden = run_encoder(p, cfg, batch.enc_feat, batch.enc_hours, batch.enc_allowed)
    return latent_heads(p, hidden)


def decode_batch(p, cfg, batch: Batch, z: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    """Outcome means, per-row log-sds (Td, P) and log-rates, all scaled."""
    mean = run_decoder(p, cfg, "out", batch.out_feat, batch.dec_hours, z,
                       batch.self_allowed, batch.cross_allowed)
    lograte = run_decoder(p, cfg, "trt", batch.trt_feat, batch.dec_hours, z,
                          batch.self_allowed, batch.cross_allowed)
    logsd = dn.getitem(p["out.logsd"], batch.sd_rows)
    return mean, logsd, lograte


def step_loglik(batch: Batch, mean: Tensor, logsd: Tensor, lograte: Tensor) -> Tensor:
    """Joint log-likelihood per (window, decoder step): shape (B, Td)."""
    mask = batch.y_mask.astype(float)
    r = (Tensor(batch.y) - mean) * dn.exp(-logsd)
    ll_y = (dn.square(r) * -0.5 - logsd - 0.5 * LOG_2PI) * mask
    x = batch.x_units
    valid = np.broadcast_to(batch.step_valid[..., None], x.shape).astype(float)
    ll_x = (lograte * x - dn.exp(lograte) - gammaln(x + 1.0)) * valid
    return dn.tsum(ll_y, axis=2) + dn.tsum(ll_x, axis=2)


def _kl_tensor(mu: Tensor, sd: Tensor, prior_sd: float, valid: np.ndarray) -> Tensor:
    kl = (math.log(prior_sd) - dn.log(sd)) + (dn.square(sd) + dn.square(mu)) * (0.5 / prior_sd ** 2) - 0.5
    return dn.tsum(kl * np.broadcast_to(valid[..., None], kl.shape).astype(float), axis=(1, 2))


def objective_L1(batch: Batch, params: ModelParams, tensors=None) -> Tensor:
    """Negative joint log-likelihood with the deterministic (mean) encoding."""
    params.require("parametric")
    p, cfg = _tensors(params, tensors), params.config
    mu, _ = encode_batch(p, cfg, batch)
    ll = step_loglik(batch, *decode_batch(p, cfg, batch, mu))
    return -dn.tsum(ll) * (1.0 / batch.size)


def objective_L2(batch: Batch, params: ModelParams, rng: np.random.Generator, tensors=None,
                 kl_weight: float | None = None, zero_sd: bool = False, eps=None) -> Tensor:
    """Negative ELBO with one reparametrised latent draw per window.

    ``zero_sd`` collapses the posterior onto its mean; together with
    ``kl_weight=0`` this reduces exactly to :func:`objective_L1`.  ``eps``
    overrides the standard-normal draw (used by finite-difference checks).
    """
    params.require("latent")
    p, cfg = _tensors(params, tensors), params.config
    w = cfg.kl_weight if kl_weight is None else kl_weight
    mu, sd = encode_batch(p, cfg, batch)
    if zero_sd:
        z = mu
    else:
        noise = rng.standard_normal(mu.shape) if eps is None else np.asarray(eps)
        z = mu + sd * noise
    ll = dn.tsum(step_loglik(batch, *decode_batch(p, cfg, batch, z)), axis=1)
    if w:
        ll = ll - _kl_tensor(mu, sd, cfg.prior_sd, batch.enc_valid) * w
    return -dn.tsum(ll) * (1.0 / batch.size)


def ar_step_losses(batch: Batch, params: ModelParams, tensors=None) -> Tensor:
    """Per-step negative log-likelihoods (B, Td) under teacher forcing."""
    params.require("autoregressive")
    p, cfg = _tensors(params, tensors), params.config
    mu, _ = encode_batch(p, cfg, batch)
    return -step_loglik(batch, *decode_batch(p, cfg, batch, mu))


def objective_L3(batch: Batch, params: ModelParams, tensors=None) -> Tensor:
    """Sum over time steps of teacher-forced one-step losses, averaged over sequences."""
    return dn.tsum(ar_step_losses(batch, params, tensors)) * (1.0 / batch.size)


def objective(batch: Batch, params: ModelParams, rng: np.random.Generator | None = None,
              tensors=None) -> Tensor:
    """Dispatch on the model mode."""
    mode = params.config.mode
    if mode == "parametric":
        return objective_L1(batch, params, tensors)
    if mode == "latent":
        if rng is None:
            raise ValueError("latent objective needs an rng")
        return objective_L2(batch, params, rng, tensors)
    return objective_L3(batch, params, tensors)


def observation_count(batch: Batch) -> int:
    """Scored cells in a batch; used to report per-cell losses."""
    return int(batch.y_mask.sum() + batch.step_valid.sum() * batch.x_units.shape[-1])
