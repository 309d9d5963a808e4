"""Forecast baselines and metrics, ablations, sample-quality checks and policy evaluation.

Forecasts are scored on midnight-aligned 24-hour windows of held-out
patients, in mmol/L, over measured cells only.  Splits are always by
patient.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from sklearn.linear_model import LogisticRegression
from sklearn.preprocessing import StandardScaler

from .decision import DecisionResult, UtilityConfig, utility_trajectory
from .rng import substream
from .seqgen.config import ALL_CHANNELS, ModelConfig
from .seqgen.model import ModelParams
from .seqgen.sampling import predict_windows
from .seqgen.training import train
from .sim import Phenotype, SimConfig, environment_rollout
from .trajectory import Context, Grid, Window, aligned_windows

log = logging.getLogger(__name__)

HYPO_THRESHOLD = 3.9


class EmptyMaskError(ValueError):
    pass


@dataclass(frozen=True)
class MetricsReport:
    mae: float
    rmse: float
    n_points: int
    horizon_profile: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    split_id: int = -1

    def __post_init__(self):
        if self.n_points <= 0:
            raise ValueError("a metrics report needs at least one point")

    def to_json(self) -> dict:
        return {
            "mae": self.mae, "rmse": self.rmse, "n_points": self.n_points, "split_id": self.split_id,
            "horizon_profile": [[None if not np.isfinite(v) else float(v) for v in row]
                                for row in np.asarray(self.horizon_profile)],
        }


# -- baselines -----------------------------------------------------------------------

def baseline_patient_mean(ctx: Context) -> np.ndarray:
    """Constant forecast at the mean of the context's measured past glucose."""
    mask = np.asarray(ctx.past_mask, dtype=bool)
    if not mask.any():
        raise EmptyMaskError("context has no measured past outcome")
    y = np.asarray(ctx.past_outcomes, dtype=float)
    means = np.array([y[p][mask[p]].mean() if mask[p].any() else y[mask].mean() for p in range(y.shape[0])])
    return np.repeat(means[:, None], ctx.K, axis=1)


@dataclass(frozen=True)
class PopulationTimeBaseline:
    """Training mean of measured glucose per clock hour (24 x P)."""

    table: np.ndarray
    covered: np.ndarray
    global_mean: np.ndarray

    @classmethod
    def fit(cls, grids: Sequence[Grid]) -> "PopulationTimeBaseline":
        P = grids[0].outcomes.shape[0]
        total, count = np.zeros((24, P)), np.zeros((24, P))
        for g in grids:
            for p in range(P):
                m = g.outcome_mask[p]
                np.add.at(total[:, p], g.hours_of_day[m], g.outcomes[p][m])
                np.add.at(count[:, p], g.hours_of_day[m], 1.0)
        glob = total.sum(axis=0) / np.maximum(count.sum(axis=0), 1.0)
        covered = count > 0
        table = np.where(covered, total / np.maximum(count, 1.0), glob)
        if not covered.all():
            log.warning("clock hours without training measurements fall back to the global mean: %s",
                        np.flatnonzero(~covered.all(axis=1)).tolist())
        return cls(table, covered, glob)

    @property
    def fallback_hours(self) -> list[int]:
        return np.flatnonzero(~self.covered.all(axis=1)).tolist()

    def predict(self, ctx: Context) -> np.ndarray:
        return self.table[np.asarray(ctx.future_hours, dtype=int)].T.copy()


# -- metrics ---------------------------------------------------------------------------

def metrics(pred, truth, mask, split_id: int = -1) -> MetricsReport:
    """MAE and RMSE over measured cells; arrays may carry leading window axes (..., P, K)."""
    pred, truth = np.asarray(pred, dtype=float), np.asarray(truth, dtype=float)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise EmptyMaskError("no measured cell to score")
    err = (pred - truth)[mask]
    prof = horizon_profile(pred.reshape((-1,) + pred.shape[-2:]), truth.reshape((-1,) + truth.shape[-2:]),
                           mask.reshape((-1,) + mask.shape[-2:]))
    return MetricsReport(float(np.abs(err).mean()), float(np.sqrt((err ** 2).mean())), int(err.size),
                         prof, split_id)


def horizon_profile(preds, truths, masks) -> np.ndarray:
    """Per hours-ahead (MAE, RMSE), shape (K, 2); NaN where a horizon has no measured cell."""
    preds, truths = np.asarray(preds, dtype=float), np.asarray(truths, dtype=float)
    masks = np.asarray(masks, dtype=bool)
    K = preds.shape[-1]
    out = np.full((K, 2), np.nan)
    for k in range(K):
        m = masks[..., k]
        if m.any():
            e = (preds[..., k] - truths[..., k])[m]
            out[k] = np.abs(e).mean(), np.sqrt((e ** 2).mean())
    return out


def patient_splits(n_patients: int, n_splits: int = 30, seed: int = 0) -> list[tuple[np.ndarray, np.ndarray]]:
    """Seeded 50/50 patient-level train/test index splits."""
    out = []
    half = n_patients // 2
    for s in range(n_splits):
        perm = substream(seed, "split", s).permutation(n_patients)
        out.append((np.sort(perm[:half]), np.sort(perm[half:])))
    return out


def evaluation_windows(grids: Sequence[Grid], K: int = 24, min_past: int = 24) -> list[Window]:
    """Midnight-aligned windows with at least one measured past and future cell."""
    return [w for g in grids for w in aligned_windows(g, K, hour=0, min_past=min_past)
            if w.context.past_mask.any() and w.future_mask.any()]


@dataclass
class ForecastComparison:
    model: MetricsReport
    patient_mean: MetricsReport
    population_time: MetricsReport

    def to_json(self) -> dict:
        return {k: getattr(self, k).to_json() for k in ("model", "patient_mean", "population_time")}

    @property
    def gap_profile(self) -> np.ndarray:
        """Smaller baseline MAE minus model MAE per hours-ahead."""
        best = np.fmin(self.patient_mean.horizon_profile[:, 0], self.population_time.horizon_profile[:, 0])
        return best - self.model.horizon_profile[:, 0]


def compare_forecasts(params: ModelParams, train_grids: Sequence[Grid], test_grids: Sequence[Grid],
                      split_id: int = -1, rng: np.random.Generator | None = None) -> ForecastComparison:
    ws = evaluation_windows(test_grids, params.config.K)
    truth = np.stack([w.future_outcomes for w in ws])
    mask = np.stack([w.future_mask for w in ws])
    pred = predict_windows(ws, params, rng if rng is not None else substream(0, "forecast"))
    pop = PopulationTimeBaseline.fit(train_grids)
    pm = np.stack([baseline_patient_mean(w.context) for w in ws])
    pt = np.stack([pop.predict(w.context) for w in ws])
    return ForecastComparison(metrics(pred, truth, mask, split_id), metrics(pm, truth, mask, split_id),
                              metrics(pt, truth, mask, split_id))


def ablation_run(include: Sequence[str], train_grids: Sequence[Grid], test_grids: Sequence[Grid],
                 config: ModelConfig, seed: int, split_id: int = -1,
                 val_grids: Sequence[Grid] | None = None) -> tuple[MetricsReport, ModelParams]:
    """Train with only the named conditioning channels and score the model forecasts."""
    unknown = set(include) - set(ALL_CHANNELS)
    if unknown:
        raise ValueError(f"unknown conditioning channel(s): {sorted(unknown)}")
    cfg = config.with_(include=tuple(c for c in ALL_CHANNELS if c in include))
    res = train(train_grids, cfg, seed, val_grids=val_grids)
    ws = evaluation_windows(test_grids, cfg.K)
    pred = predict_windows(ws, res.params, substream(seed, "forecast"))
    truth = np.stack([w.future_outcomes for w in ws])
    mask = np.stack([w.future_mask for w in ws])
    return metrics(pred, truth, mask, split_id), res.params


# -- sample quality ---------------------------------------------------------------------

def summary_features(y, x) -> np.ndarray:
    """Per-trajectory features: glucose mean/sd/min/max and lag-1 autocorrelation,
    then total dose and injection count per treatment channel.

    ``y`` is (N, P, K), ``x`` is (N, D, K).
    """
    y, x = np.asarray(y, dtype=float), np.asarray(x, dtype=float)
    yc = y - y.mean(axis=-1, keepdims=True)
    denom = (yc ** 2).sum(axis=-1)
    lag1 = np.where(denom > 0, (yc[..., 1:] * yc[..., :-1]).sum(axis=-1) / np.where(denom > 0, denom, 1.0), 0.0)
    feats = [y.mean(-1), y.std(-1), y.min(-1), y.max(-1), lag1, x.sum(-1), (x > 0).sum(-1)]
    return np.concatenate(feats, axis=-1)


def roc_auc(labels, scores) -> float:
    """Rank-based area under the ROC curve (ties count one half)."""
    labels = np.asarray(labels, dtype=bool)
    scores = np.asarray(scores, dtype=float)
    n1, n0 = labels.sum(), (~labels).sum()
    if n1 == 0 or n0 == 0:
        raise ValueError("AUC needs both classes")
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(scores.size)
    s = scores[order]
    i = 0
    while i < s.size:
        j = i
        while j + 1 < s.size and s[j + 1] == s[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return float((ranks[labels].sum() - n1 * (n1 + 1) / 2.0) / (n1 * n0))


def real_vs_generated_auc(real: tuple[np.ndarray, np.ndarray], generated: tuple[np.ndarray, np.ndarray],
                          folds: int = 5, seed: int = 0) -> float:
    """Cross-validated AUC of a logistic classifier telling generated from real windows.

    Each argument is ``(y, x)`` with shapes (N, P, K) and (N, D, K).  Folds are
    seeded per set, so the result does not depend on which set is labelled
    positive: the classifier learns the direction, hence
    ``AUC(A, B) == AUC(B, A)``.  0.5 means indistinguishable.
    """
    fa, fb = summary_features(*real), summary_features(*generated)
    if len(fa) < folds or len(fb) < folds:
        raise ValueError(f"each set needs at least {folds} samples")
    X = np.concatenate([fa, fb])
    lab = np.concatenate([np.zeros(len(fa), bool), np.ones(len(fb), bool)])
    fold = np.concatenate([substream(seed, "fold", len(fa)).permutation(len(fa)) % folds,
                           substream(seed, "fold", len(fb)).permutation(len(fb)) % folds])
    # a row present in both sets keeps all its copies in one fold, so no test
    # point has an oppositely labelled twin in training
    uniq, group = np.unique(X, axis=0, return_inverse=True)
    group = group.ravel()
    shared = np.zeros(len(uniq), bool)
    shared[np.intersect1d(group[~lab], group[lab])] = True
    group_fold = substream(seed, "fold", "shared").permutation(len(uniq)) % folds
    fold = np.where(shared[group], group_fold[group], fold)
    scores = np.empty(len(X))
    for k in range(folds):
        tr, te = fold != k, fold == k
        if lab[tr].all() or not lab[tr].any():
            raise ValueError("a training fold holds a single class")
        sc = StandardScaler().fit(X[tr])
        clf = LogisticRegression(C=1.0, tol=1e-12, max_iter=10000).fit(sc.transform(X[tr]), lab[tr])
        scores[te] = clf.decision_function(sc.transform(X[te]))
    return roc_auc(lab, scores)


# -- decisions against the simulator -----------------------------------------------------

def out_of_support_score(x, reference) -> float:
    """L1 distance from treatment ``x`` (D, K) to its nearest neighbour in ``reference`` (N, D, K)."""
    x, ref = np.asarray(x, dtype=float), np.asarray(reference, dtype=float)
    if ref.ndim != 3 or ref.shape[1:] != x.shape:
        raise ValueError("reference must have shape (N, D, K) matching x")
    return float(np.abs(ref - x).sum(axis=(1, 2)).min())


@dataclass(frozen=True)
class PatientOracle:
    phenotype: Phenotype
    true_carbs: np.ndarray


@dataclass
class PolicyReport:
    mean_utility: float
    time_in_range: float
    hypo_rate: float
    per_context_utility: np.ndarray
    treatments: list[np.ndarray]

    def to_json(self) -> dict:
        return {"mean_utility": self.mean_utility, "time_in_range": self.time_in_range,
                "hypo_rate": self.hypo_rate,
                "per_context_utility": [float(u) for u in self.per_context_utility]}


def policy_evaluation(decide: Callable[[Context, int], "DecisionResult | np.ndarray"],
                      contexts: Sequence[Context], oracles: Mapping[str, PatientOracle], seed: int,
                      S: int = 100, ucfg: UtilityConfig = UtilityConfig(),
                      sim_config: SimConfig | None = None) -> PolicyReport:
    """Roll each chosen treatment out on the patient's true dynamics and score it.

    ``decide(ctx, i)`` returns a :class:`DecisionResult` or a (D, K) array.
    Time in range uses the utility band; the hypoglycaemia rate is the
    fraction of simulated hours below 3.9 mmol/L.

    Raises:
        KeyError: a context whose patient has no oracle.
    """
    utils, tir, hypo, chosen = [], [], [], []
    for i, ctx in enumerate(contexts):
        if ctx.patient_id not in oracles:
            raise KeyError(f"no phenotype for patient {ctx.patient_id!r}")
        orc = oracles[ctx.patient_id]
        res = decide(ctx, i)
        x = res.chosen_treatment if isinstance(res, DecisionResult) else np.asarray(res)
        t0 = ctx.t_split
        carbs = np.asarray(orc.true_carbs[t0:t0 + ctx.K], dtype=float)[None]
        y = environment_rollout(orc.phenotype, ctx, x, carbs, substream(seed, "oracle", i), S,
                                sim_config, past_carbs=orc.true_carbs[:t0])
        utils.append(float(utility_trajectory(y, ucfg).mean()))
        tir.append(float(((y >= ucfg.band_low) & (y <= ucfg.band_high)).mean()))
        hypo.append(float((y < HYPO_THRESHOLD).mean()))
        chosen.append(np.asarray(x))
    return PolicyReport(float(np.mean(utils)), float(np.mean(tir)), float(np.mean(hypo)),
                        np.array(utils), chosen)


def oracles_from_patients(patients) -> dict[str, PatientOracle]:
    """Map patient id to its simulator oracle, from ``SimulatedPatient`` objects or sidecar dicts."""
    out = {}
    for p in patients:
        if isinstance(p, Mapping):
            out[p["id"]] = PatientOracle(Phenotype(**p["phenotype"]), np.asarray(p["true_carbs"], dtype=float))
        else:
            out[p.record.id] = PatientOracle(p.phenotype, np.asarray(p.true_carbs, dtype=float))
    return out


def standard_error(values) -> float:
    v = np.asarray(values, dtype=float)
    return float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else 0.0
