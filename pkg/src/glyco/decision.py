"""Utilities over glucose trajectories and treatment selection with a generative model.

Three ways to pick a treatment for a context:

* ``decide_direct``: the most probable treatment under the learned treatment
  model (what a clinician would usually do);
* ``decide_indirect``: maximise Monte-Carlo expected utility over the whole
  non-negative integer lattice, ignoring how plausible the treatment is;
* ``decide_joint``: draw candidates from the treatment model and keep the one
  with the highest expected utility, so the choice stays within the support
  of observed practice.

``finetune_policy`` then shifts the treatment model itself towards higher
expected utility with a score-function gradient.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np
from scipy.special import gammaln

from . import diffnum as dn
from .rng import substream
from .seqgen.batching import prepare_grid, treatment_rows
from .seqgen.model import ModeError, ModelParams
from .seqgen.network import run_decoder
from .seqgen.objectives import objective
from .seqgen.sampling import Conditioner
from .seqgen.training import sample_batch
from .trajectory import Context, Grid

log = logging.getLogger(__name__)

SHAPES = ("plateau-exp", "gaussian-bump")


class SingleSampleWarning(UserWarning):
    """Standard error requested from a single Monte-Carlo sample."""


@dataclass(frozen=True)
class UtilityConfig:
    """Shape and weighting of the trajectory utility.

    ``plateau-exp`` is 1 inside ``[band_low, band_high]`` and decays with a
    squared-distance exponential outside, much faster below the band than
    above.  ``gaussian-bump`` is ``exp(-(y - bump_center)^2 / (2 bump_width^2))``
    and admits a closed-form expectation under Gaussian outcomes.  ``scale``
    and ``offset`` apply a positive-affine map to the trajectory utility.
    """

    band_low: float = 3.9
    band_high: float = 10.0
    hypo_steepness: float = 0.5
    hyper_steepness: float = 0.05
    gamma: float = 1.0
    alpha: tuple[float, ...] = (1.0,)
    shape: str = "plateau-exp"
    bump_center: float = 7.0
    bump_width: float = 2.0
    scale: float = 1.0
    offset: float = 0.0

    def __post_init__(self):
        if not self.band_low < self.band_high:
            raise ValueError("band_low must be below band_high")
        if self.hypo_steepness <= 0 or self.hyper_steepness <= 0:
            raise ValueError("steepness parameters must be positive")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        if any(a <= 0 for a in self.alpha):
            raise ValueError("alpha weights must be positive")
        if self.shape not in SHAPES:
            raise ValueError(f"shape must be one of {SHAPES}")
        if self.bump_width <= 0 or self.scale <= 0:
            raise ValueError("bump_width and scale must be positive")

    def to_json(self) -> dict:
        d = asdict(self)
        d["alpha"] = list(self.alpha)
        return d

    @classmethod
    def from_json(cls, obj: dict) -> "UtilityConfig":
        obj = dict(obj)
        if "alpha" in obj:
            obj["alpha"] = tuple(obj["alpha"])
        return cls(**obj)


@dataclass(frozen=True)
class DecisionResult:
    chosen_treatment: np.ndarray
    estimated_eu: float
    per_candidate_eu: np.ndarray
    candidate_index: int
    standard_error: float = 0.0
    flags: tuple[str, ...] = ()

    def __post_init__(self):
        eu = np.asarray(self.per_candidate_eu)
        if not (0 <= self.candidate_index < eu.size):
            raise ValueError("candidate_index out of range")

    def to_json(self) -> dict:
        return {
            "chosen_treatment": np.asarray(self.chosen_treatment).astype(int).tolist(),
            "estimated_eu": float(self.estimated_eu),
            "standard_error": float(self.standard_error),
            "per_candidate_eu": [float(v) for v in np.asarray(self.per_candidate_eu)],
            "candidate_index": int(self.candidate_index),
            "flags": list(self.flags),
        }


class MCEstimate(NamedTuple):
    estimate: float
    standard_error: float


# -- utilities ---------------------------------------------------------------------

def utility_scalar(y, cfg: UtilityConfig = UtilityConfig()):
    """Per-value utility in [0, 1]; vectorised over arrays."""
    y = np.asarray(y, dtype=float)
    if cfg.shape == "gaussian-bump":
        return np.exp(-((y - cfg.bump_center) ** 2) / (2.0 * cfg.bump_width ** 2))
    below = np.maximum(cfg.band_low - y, 0.0)
    above = np.maximum(y - cfg.band_high, 0.0)
    return np.exp(-cfg.hypo_steepness * below ** 2 - cfg.hyper_steepness * above ** 2)


def _discounts(K: int, gamma: float) -> np.ndarray:
    return gamma ** np.arange(1, K + 1)


def utility_trajectory(y, cfg: UtilityConfig = UtilityConfig()):
    """``sum_t gamma^t prod_p alpha_p u(y_pt)`` with ``t`` counted from 1.

    ``y`` has shape (..., P, K); the result has the leading shape.
    """
    y = np.asarray(y, dtype=float)
    P, K = y.shape[-2:]
    alpha = np.asarray(cfg.alpha, dtype=float)
    if alpha.size == 1 and P > 1:
        alpha = np.repeat(alpha, P)
    if alpha.size != P:
        raise ValueError(f"alpha has {alpha.size} weights for {P} outcomes")
    cell = utility_scalar(y, cfg) * alpha[:, None]
    return cfg.scale * (np.prod(cell, axis=-2) @ _discounts(K, cfg.gamma)) + cfg.offset


def mc_expected_utility(samples, cfg: UtilityConfig = UtilityConfig()) -> MCEstimate:
    """Sample mean of trajectory utilities and its standard error ``sd / sqrt(S)``."""
    samples = np.asarray(samples, dtype=float)
    if samples.ndim != 3 or samples.shape[0] < 1:
        raise ValueError("samples must have shape (S, P, K) with S >= 1")
    u = utility_trajectory(samples, cfg)
    S = u.size
    if S == 1:
        warnings.warn("standard error from one sample is reported as 0", SingleSampleWarning, stacklevel=2)
        return MCEstimate(float(u[0]), 0.0)
    if np.all(u == u[0]):
        # np.std leaves rounding residue on constant input
        return MCEstimate(float(u[0]), 0.0)
    return MCEstimate(float(u.mean()), float(u.std(ddof=1) / math.sqrt(S)))


def exact_gaussian_eu(mu, sigma, cfg: UtilityConfig, mode: str = "parametric") -> float:
    """Closed-form expected utility of independent Gaussian cells under a Gaussian-bump utility.

    Each cell contributes ``s / sqrt(s^2 + sigma^2) * exp(-(mu - m)^2 / (2 (s^2 + sigma^2)))``;
    cells combine with the same discounted sum/product as :func:`utility_trajectory`.

    Raises:
        ModeError: for latent or autoregressive models, whose marginals are not Gaussian.
    """
    if mode != "parametric":
        raise ModeError(f"exact expected utility needs Gaussian marginals; mode {mode!r} is unsupported")
    if cfg.shape != "gaussian-bump":
        raise ValueError("exact expected utility is only available for the gaussian-bump shape")
    mu, sigma = np.atleast_2d(np.asarray(mu, dtype=float)), np.atleast_2d(np.asarray(sigma, dtype=float))
    if np.any(sigma < 0):
        raise ValueError("sigma must be non-negative")
    s2 = cfg.bump_width ** 2
    v = s2 + sigma ** 2
    cell = np.sqrt(s2 / v) * np.exp(-((mu - cfg.bump_center) ** 2) / (2.0 * v))
    alpha = np.broadcast_to(np.asarray(cfg.alpha, dtype=float), (mu.shape[0],))
    per_t = np.prod(cell * alpha[:, None], axis=0)
    return float(cfg.scale * per_t @ _discounts(mu.shape[1], cfg.gamma) + cfg.offset)


# -- decision strategies ---------------------------------------------------------------

def _stream(rng, *labels):
    return rng if rng is not None else substream(0, *labels)


def _scores(samples: np.ndarray, cfg: UtilityConfig) -> tuple[np.ndarray, np.ndarray]:
    """Per-candidate EU and standard error from (U, S, P, K) samples."""
    u = utility_trajectory(samples, cfg)
    S = u.shape[1]
    se = u.std(axis=1, ddof=1) / math.sqrt(S) if S > 1 else np.zeros(u.shape[0])
    return u.mean(axis=1), se


def decide_direct(ctx: Context, params: ModelParams, cfg: UtilityConfig = UtilityConfig(),
                  S: int = 200, rng: np.random.Generator | None = None) -> DecisionResult:
    """Most probable treatment; its expected utility is estimated afterwards for reporting."""
    cond = Conditioner(ctx, params)
    x = cond.most_probable_treatment()
    samples = cond.sample_outcomes_crn(x[None], S, _stream(rng, "direct"))
    eu, se = _scores(samples, cfg)
    return DecisionResult(x, float(eu[0]), eu, 0, float(se[0]))


@dataclass(frozen=True)
class SearchConfig:
    """Budget for the lattice search: steepest ascent over single-cell +-1 moves.

    The first start is all zeros; ``restarts`` further starts are drawn
    uniformly from ``[0, start_high]`` per cell.  The search stops after
    ``max_evals`` candidate evaluations and flags the result.
    """

    restarts: int = 2
    start_high: int = 6
    max_iters: int = 60
    max_evals: int = 40000
    S: int = 200


def decide_indirect(ctx: Context, params: ModelParams, cfg: UtilityConfig = UtilityConfig(),
                    search_cfg: SearchConfig = SearchConfig(),
                    rng: np.random.Generator | None = None) -> DecisionResult:
    """Maximise Monte-Carlo expected utility over all non-negative integer treatments.

    All candidates share one set of outcome noise draws (common random
    numbers).  No plausibility constraint is applied, which is the point:
    the optimum often lies far from anything seen in practice.
    """
    rng = _stream(rng, "indirect")
    cond = Conditioner(ctx, params)
    D, K = params.config.treatment_dim, cond.K
    S = search_cfg.S
    noise_seed = int(rng.integers(0, 2**63 - 1))
    evals = 0

    def score(xs: np.ndarray) -> np.ndarray:
        nonlocal evals
        evals += xs.shape[0]
        eu, _ = _scores(cond.sample_outcomes_crn(xs, S, substream(noise_seed, "crn")), cfg)
        return eu

    moves = np.concatenate([np.eye(D * K), -np.eye(D * K)]).reshape(2 * D * K, D, K)
    starts = [np.zeros((D, K))] + [rng.integers(0, search_cfg.start_high + 1, size=(D, K)).astype(float)
                                   for _ in range(search_cfg.restarts)]
    best_x, best_eu, exhausted = None, -np.inf, False
    for x in starts:
        cur = score(x[None])[0]
        for _ in range(search_cfg.max_iters):
            if evals >= search_cfg.max_evals:
                exhausted = True
                break
            nbrs = x[None] + moves
            nbrs = nbrs[(nbrs >= 0).all(axis=(1, 2))]
            eu = score(nbrs)
            j = int(np.argmax(eu))
            if eu[j] <= cur:
                break
            x, cur = nbrs[j], eu[j]
        if cur > best_eu:
            best_x, best_eu = x, cur
        if exhausted:
            break
    samples = cond.sample_outcomes_crn(best_x[None], S, substream(noise_seed, "crn"))
    eu, se = _scores(samples, cfg)
    flags = ("budget-exhausted",) if exhausted else ()
    return DecisionResult(best_x.astype(np.int64), float(eu[0]), eu, 0, float(se[0]), flags)


def decide_joint(ctx: Context, params: ModelParams, cfg: UtilityConfig = UtilityConfig(),
                 U: int = 100, S: int = 200, rng: np.random.Generator | None = None) -> DecisionResult:
    """Sample ``U`` plausible treatments and keep the one with the highest expected utility.

    Ties go to the lowest candidate index.
    """
    if U < 1 or S < 1:
        raise ValueError("U and S must be positive")
    rng = _stream(rng, "joint")
    cond = Conditioner(ctx, params)
    cands = cond.sample_treatments(U, rng)
    eu, se = _scores(cond.sample_outcomes_crn(cands, S, rng), cfg)
    j = int(np.argmax(eu))
    return DecisionResult(cands[j], float(eu[j]), eu, j, float(se[j]))


def joint_expected_utility(ctx: Context, params: ModelParams, cfg: UtilityConfig, S: int,
                           rng: np.random.Generator) -> MCEstimate:
    """Expected utility under the model's own joint distribution of treatments and outcomes.

    Each of the ``S`` draws samples a treatment from the treatment model and
    one outcome trajectory given it.
    """
    cond = Conditioner(ctx, params)
    xs = cond.sample_treatments(S, rng)
    if params.config.mode == "parametric":
        mean = cond.outcome_mean(xs)
        y = (mean + cond.sd * rng.standard_normal(mean.shape)) * params.scaler.outcome_sd \
            + params.scaler.outcome_mean
    else:
        y = np.stack([cond.sample_outcomes(x, 1, rng)[0] for x in xs])
    return mc_expected_utility(y, cfg)


# -- policy fine-tuning ------------------------------------------------------------

def poisson_score_grad(rate: float, utility: Callable[[np.ndarray], np.ndarray], n: int,
                       rng: np.random.Generator, baseline: float | None = None) -> float:
    """Score-function estimate of ``d E[u(x)] / d log(rate)`` for ``x ~ Poisson(rate)``.

    Uses ``(u(x) - b) * (x - rate)``; the baseline defaults to the sample mean
    of ``u`` (which leaves the estimator consistent).
    """
    x = rng.poisson(rate, size=n).astype(float)
    u = np.asarray(utility(x), dtype=float)
    b = u.mean() if baseline is None else baseline
    return float(np.mean((u - b) * (x - rate)))


@dataclass(frozen=True)
class FinetuneConfig:
    contexts_per_step: int = 8
    U: int = 16
    S: int = 32
    lr: float = 1e-3
    baseline_decay: float = 0.9


@dataclass
class FinetuneResult:
    params: ModelParams
    trace: list[dict] = field(default_factory=list)


def _trt_logpmf(p, cfg, cond: Conditioner, xs: np.ndarray, z: np.ndarray) -> dn.Tensor:
    """Differentiable log p(x | v, z) per candidate, shape (U,)."""
    U = xs.shape[0]
    K = cond.K
    feats = np.broadcast_to(treatment_rows(cond.v, cond.scaler, cfg), (U, K, cfg.covariate_dim))
    lr = run_decoder(p, cfg, "trt", feats, np.broadcast_to(cond.hours, (U, K)), dn.Tensor(z),
                     np.ones((U, K, K), dtype=bool), np.ones((U, K, z.shape[1]), dtype=bool))
    x = np.swapaxes(xs, 1, 2).astype(float)
    ll = lr * x - dn.exp(lr) - gammaln(x + 1.0)
    return dn.tsum(ll, axis=(1, 2))


def finetune_policy(params: ModelParams, contexts: Sequence[Context], cfg: UtilityConfig,
                    alpha_mix: float, steps: int, rng: np.random.Generator,
                    train_grids: Sequence[Grid] | None = None,
                    ft: FinetuneConfig = FinetuneConfig()) -> FinetuneResult:
    """Ascend ``alpha * expected utility + (1 - alpha) * log-likelihood`` in the treatment decoder.

    Only ``trt.*`` parameters move.  The utility gradient is the score-function
    estimator ``(EU(x) - b) * grad log p(x | c)`` over ``ft.U`` sampled
    treatments per context, with ``b`` a moving average of recent EUs.  The
    log-likelihood term uses mini-batches of ``train_grids`` and is required
    whenever ``alpha_mix < 1``.

    Raises:
        ModeError: autoregressive models.
        RuntimeError: a non-finite objective.
    """
    params.require("parametric", "latent")
    params.require_trained()
    if not 0.0 <= alpha_mix <= 1.0:
        raise ValueError("alpha_mix must lie in [0, 1]")
    if alpha_mix < 1.0 and not train_grids:
        raise ValueError("the log-likelihood term needs training grids")
    mcfg = params.config
    names = [k for k in params.arrays if k.startswith("trt.")]
    state = dn.adam_init({k: params.arrays[k] for k in names})
    conds = [Conditioner(c, params) for c in contexts]
    pgs = [prepare_grid(g, params.scaler, mcfg) for g in train_grids] if train_grids else []
    pgs = [pg for pg in pgs if pg.T > mcfg.K]
    baseline = None
    result = FinetuneResult(params)
    for step in range(1, steps + 1):
        tensors = {k: dn.Tensor(v, requires_grad=k in names, name=k) for k, v in params.arrays.items()}
        total = dn.Tensor(0.0)
        rec = {"step": step}
        if alpha_mix > 0:
            pick = rng.choice(len(conds), size=min(ft.contexts_per_step, len(conds)), replace=False)
            surrogate, mean_eus = dn.Tensor(0.0), []
            for i in pick:
                cond = conds[i]
                z = cond.latent_draws(ft.U, rng)
                with dn.no_grad():
                    rates = cond.rates(np.ascontiguousarray(z))
                xs = rng.poisson(rates).astype(float)
                eu, _ = _scores(cond.sample_outcomes_crn(xs, ft.S, rng), cfg)
                mean_eus.append(eu.mean())
                b = eu.mean() if baseline is None else baseline
                logp = _trt_logpmf(tensors, mcfg, cond, xs, np.ascontiguousarray(z))
                surrogate = surrogate + dn.tsum(logp * (eu - b)) * (1.0 / ft.U)
            m = float(np.mean(mean_eus))
            baseline = m if baseline is None else ft.baseline_decay * baseline + (1 - ft.baseline_decay) * m
            total = total - surrogate * (alpha_mix / len(pick))
            rec["eu"] = m
        if alpha_mix < 1:
            batch = sample_batch(pgs, mcfg, rng)
            nll = objective(batch, params, rng, tensors)
            total = total + nll * (1.0 - alpha_mix)
            rec["nll"] = nll.item()
        if not math.isfinite(total.item()):
            raise RuntimeError(f"non-finite fine-tuning objective at step {step}")
        total.backward()
        grads = {k: tensors[k].grad for k in names if tensors[k].grad is not None}
        new, state = dn.adam_step({k: params.arrays[k] for k in names}, grads, state, lr=ft.lr)
        params = params.with_arrays({**params.arrays, **new})
        conds = [_rebind(c, params) for c in conds]
        result.trace.append(rec)
    result.params = params
    return result


def _rebind(cond: Conditioner, params: ModelParams) -> Conditioner:
    """Share the frozen encoding, swap in updated treatment-decoder weights."""
    new = object.__new__(Conditioner)
    new.__dict__.update(cond.__dict__)
    new.params = params
    new.p = {**cond.p, **{k: dn.Tensor(v) for k, v in params.arrays.items() if k.startswith("trt.")}}
    return new
