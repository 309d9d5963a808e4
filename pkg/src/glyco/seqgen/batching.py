"""Turning raw grids, windows and contexts into scaled, padded model batches.

Encoder rows carry ``[y*m, m, basal, bolus, carbs, static...]``.  Unmeasured
glucose enters as 0 with its mask flag 0, so imputed values never reach the
network (linear imputation would otherwise leak the next measurement, which
can lie in the future window).  Channels excluded by ``ModelConfig.include``
are zeroed here.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..preprocess import ScalerParams
from ..trajectory import Context, Grid, Window
from .config import ModelConfig
from .network import START_HOUR, encoder_features


@dataclass(eq=False)
class Batch:
    enc_feat: np.ndarray      # (B, Te, Fe)
    enc_hours: np.ndarray     # (B, Te)
    enc_valid: np.ndarray     # (B, Te)
    enc_allowed: np.ndarray   # (B, Te, Te)
    out_feat: np.ndarray      # (B, Td, Fo)
    trt_feat: np.ndarray      # (B, Td, Ft)
    dec_hours: np.ndarray     # (B, Td)
    self_allowed: np.ndarray  # (B, Td, Td)
    cross_allowed: np.ndarray # (B, Td, Te)
    y: np.ndarray             # (B, Td, P) scaled
    y_mask: np.ndarray        # (B, Td, P)
    x_units: np.ndarray       # (B, Td, D)
    step_valid: np.ndarray    # (B, Td)
    sd_rows: np.ndarray       # (Td,)

    @property
    def size(self) -> int:
        return self.enc_feat.shape[0]


def _static_scaled(static: np.ndarray, scaler: ScalerParams) -> np.ndarray:
    static = np.asarray(static, dtype=float)
    if len(scaler.static_mean) == static.shape[0]:
        return (static - np.asarray(scaler.static_mean)) / np.asarray(scaler.static_sd)
    return static


def encoder_rows(y, m, x, v, static, scaler: ScalerParams, cfg: ModelConfig) -> np.ndarray:
    """Encoder features (..., n, Fe) from channel-major raw arrays (..., C, n)."""
    inc = cfg.include
    m = np.asarray(m, dtype=float)
    ys = np.where(m > 0, (np.asarray(y, dtype=float) - scaler.outcome_mean) / scaler.outcome_sd, 0.0)
    xs = np.asarray(x, dtype=float) / np.asarray(scaler.treatment_sd)[:, None]
    vs = np.asarray(v, dtype=float) / scaler.covariate_sd
    lead, n = ys.shape[:-2], ys.shape[-1]
    ss = np.broadcast_to(_static_scaled(static, scaler)[:, None], lead + (cfg.static_dim, n))
    parts = [
        ys if "past-y" in inc else np.zeros_like(ys),
        m if "past-y" in inc else np.zeros_like(m),
        xs if "past-x" in inc else np.zeros_like(xs),
        vs if "past-v" in inc else np.zeros_like(vs),
        ss if "static" in inc else np.zeros_like(ss),
    ]
    parts = [np.broadcast_to(a, lead + a.shape[-2:]) for a in parts]
    return np.swapaxes(np.concatenate(parts, axis=-2), -1, -2)


def start_row(static, scaler: ScalerParams, cfg: ModelConfig) -> np.ndarray:
    row = np.zeros(encoder_features(cfg))
    if "static" in cfg.include:
        row[-cfg.static_dim:] = _static_scaled(static, scaler)
    return row


def outcome_rows(x, v, scaler: ScalerParams, cfg: ModelConfig) -> np.ndarray:
    """Outcome-decoder features (..., K, D+V) from raw x (..., D, K) and v (V, K)."""
    x = np.asarray(x, dtype=float)
    xs = x / np.asarray(scaler.treatment_sd)[:, None]
    vs = np.broadcast_to(np.asarray(v, dtype=float) / scaler.covariate_sd, x.shape[:-2] + np.shape(v))
    if "future-x" not in cfg.include:
        xs = np.zeros_like(xs)
    if "future-v" not in cfg.include:
        vs = np.zeros_like(vs)
    return np.swapaxes(np.concatenate([xs, vs], axis=-2), -1, -2)


def treatment_rows(v, scaler: ScalerParams, cfg: ModelConfig) -> np.ndarray:
    vs = np.asarray(v, dtype=float) / scaler.covariate_sd
    if "future-v" not in cfg.include:
        vs = np.zeros_like(vs)
    return vs.T


@dataclass(eq=False)
class PreparedGrid:
    """Per-patient feature rows computed once, then sliced into windows."""

    enc: np.ndarray     # (T, Fe)
    out: np.ndarray     # (T, D+V)
    trt: np.ndarray     # (T, V)
    hours: np.ndarray   # (T,)
    y: np.ndarray       # (T, P) scaled
    mask: np.ndarray    # (T, P)
    x_units: np.ndarray # (T, D)
    start: np.ndarray   # (Fe,)

    @property
    def T(self) -> int:
        return self.hours.shape[0]


def prepare_grid(grid: Grid, scaler: ScalerParams, cfg: ModelConfig) -> PreparedGrid:
    return PreparedGrid(
        enc=encoder_rows(grid.outcomes, grid.outcome_mask, grid.treatments, grid.covariates,
                         grid.static_features, scaler, cfg),
        out=outcome_rows(grid.treatments, grid.covariates, scaler, cfg),
        trt=treatment_rows(grid.covariates, scaler, cfg),
        hours=np.asarray(grid.hours_of_day, dtype=int),
        y=((grid.outcomes - scaler.outcome_mean) / scaler.outcome_sd).T,
        mask=grid.outcome_mask.T.astype(bool),
        x_units=grid.treatments.T.copy(),
        start=start_row(grid.static_features, scaler, cfg),
    )


def _stack(items: list[dict]) -> dict:
    return {k: np.stack([it[k] for it in items]) for k in items[0]}


def _window_item(pg: PreparedGrid, t: int, cfg: ModelConfig) -> dict:
    H, K = cfg.history, cfg.K
    lo = max(0, t - H)
    n = t - lo
    enc = np.zeros((H, pg.enc.shape[1]))
    enc[H - n:] = pg.enc[lo:t]
    hours = np.zeros(H, dtype=int)
    hours[H - n:] = pg.hours[lo:t]
    valid = np.zeros(H, dtype=bool)
    valid[H - n:] = True
    fut = slice(t, t + K)
    return {
        "enc_feat": enc, "enc_hours": hours, "enc_valid": valid,
        "out_feat": pg.out[fut], "trt_feat": pg.trt[fut], "dec_hours": pg.hours[fut],
        "y": pg.y[fut], "y_mask": pg.mask[fut], "x_units": pg.x_units[fut],
    }


def _finish_window_batch(st: dict, cfg: ModelConfig) -> Batch:
    B, H = st["enc_valid"].shape
    K = st["dec_hours"].shape[1]
    valid = st["enc_valid"]
    return Batch(
        enc_feat=st["enc_feat"], enc_hours=st["enc_hours"], enc_valid=valid,
        enc_allowed=np.broadcast_to(valid[:, None, :], (B, H, H)),
        out_feat=st["out_feat"], trt_feat=st["trt_feat"], dec_hours=st["dec_hours"],
        self_allowed=np.ones((B, K, K), dtype=bool),
        cross_allowed=np.broadcast_to(valid[:, None, :], (B, K, H)),
        y=st["y"], y_mask=st["y_mask"].astype(bool), x_units=st["x_units"],
        step_valid=np.ones((B, K), dtype=bool),
        sd_rows=np.arange(K),
    )


def window_batch_from_prepared(items: Sequence[tuple[PreparedGrid, int]], cfg: ModelConfig) -> Batch:
    for pg, t in items:
        if t < 1 or t + cfg.K > pg.T:
            raise ValueError(f"window t_split={t} does not fit a grid of length {pg.T}")
    return _finish_window_batch(_stack([_window_item(pg, t, cfg) for pg, t in items]), cfg)


def window_batch(windows: Sequence[Window], scaler: ScalerParams, cfg: ModelConfig) -> Batch:
    """Batch for the parametric and latent objectives from raw windows."""
    if not windows:
        raise ValueError("empty window batch")
    items = []
    for w in windows:
        if w.K != cfg.K:
            raise ValueError(f"window length {w.K} does not match model K={cfg.K}")
        c = w.context
        n = c.past_length
        ys = np.concatenate([c.past_outcomes, w.future_outcomes], axis=1)
        ms = np.concatenate([c.past_mask, w.future_mask], axis=1)
        xs = np.concatenate([c.past_treatments, w.future_treatments], axis=1)
        vs = np.concatenate([c.past_covariates, c.future_covariates], axis=1)
        hs = np.concatenate([c.past_hours, c.future_hours])
        g = Grid(ys, xs, vs, ms, hs, np.asarray(c.static_features, dtype=float), c.patient_id)
        items.append(_window_item(prepare_grid(g, scaler, cfg), n, cfg))
    return _finish_window_batch(_stack(items), cfg)


def ar_batch_from_prepared(items: Sequence[tuple[PreparedGrid, int, int]], cfg: ModelConfig) -> Batch:
    """Teacher-forced chunks ``(grid, start, length)``.

    The encoder sees ``[start-token, h_s, ..., h_{s+C-2}]`` and decoder step
    ``j`` may only attend to encoder positions ``<= j``, i.e. to the history
    strictly before its own time step.
    """
    C = max(c for _, _, c in items)
    rows = []
    for pg, s, c in items:
        if c < 1 or s < 0 or s + c > pg.T:
            raise ValueError("autoregressive chunk out of range")
        Fe = pg.enc.shape[1]
        enc = np.zeros((C, Fe))
        enc[0] = pg.start
        enc[1:c] = pg.enc[s:s + c - 1]
        ehours = np.zeros(C, dtype=int)
        ehours[0] = START_HOUR
        ehours[1:c] = pg.hours[s:s + c - 1]
        valid = np.zeros(C, dtype=bool)
        valid[:c] = True
        pad = C - c

        def padded(a, fill=0):
            return np.concatenate([a, np.full((pad,) + a.shape[1:], fill, dtype=a.dtype)]) if pad else a

        sl = slice(s, s + c)
        rows.append({
            "enc_feat": enc, "enc_hours": ehours, "enc_valid": valid,
            "out_feat": padded(pg.out[sl]), "trt_feat": padded(pg.trt[sl]),
            "dec_hours": padded(pg.hours[sl]), "y": padded(pg.y[sl]),
            "y_mask": padded(pg.mask[sl], False), "x_units": padded(pg.x_units[sl]),
            "step_valid": valid.copy(),
        })
    st = _stack(rows)
    B = len(rows)
    tri = np.tril(np.ones((C, C), dtype=bool))
    valid = st["enc_valid"]
    enc_allowed = tri[None] & valid[:, None, :]
    return Batch(
        enc_feat=st["enc_feat"], enc_hours=st["enc_hours"], enc_valid=valid,
        enc_allowed=enc_allowed,
        out_feat=st["out_feat"], trt_feat=st["trt_feat"], dec_hours=st["dec_hours"],
        self_allowed=np.broadcast_to(np.eye(C, dtype=bool), (B, C, C)),
        cross_allowed=enc_allowed,
        y=st["y"], y_mask=st["y_mask"].astype(bool), x_units=st["x_units"],
        step_valid=st["step_valid"], sd_rows=np.zeros(C, dtype=int),
    )


def ar_batch(grids: Sequence[Grid], scaler: ScalerParams, cfg: ModelConfig,
             max_len: int | None = None) -> Batch:
    """Whole grids (optionally truncated to ``max_len`` steps) as teacher-forced chunks."""
    items = []
    for g in grids:
        pg = prepare_grid(g, scaler, cfg)
        items.append((pg, 0, pg.T if max_len is None else min(pg.T, max_len)))
    return ar_batch_from_prepared(items, cfg)


def context_encoder_inputs(ctx: Context, scaler: ScalerParams, cfg: ModelConfig,
                           start_token: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Encoder rows and hours for the last ``history`` steps of a context."""
    if ctx.past_length == 0 and not start_token:
        raise ValueError("empty history")
    lo = max(0, ctx.past_length - cfg.history)
    sl = slice(lo, ctx.past_length)
    rows = encoder_rows(ctx.past_outcomes[:, sl], ctx.past_mask[:, sl], ctx.past_treatments[:, sl],
                        ctx.past_covariates[:, sl], ctx.static_features, scaler, cfg)
    hours = np.asarray(ctx.past_hours[sl], dtype=int)
    if start_token:
        rows = np.concatenate([start_row(ctx.static_features, scaler, cfg)[None], rows])
        hours = np.concatenate([[START_HOUR], hours]).astype(int)
    return rows, hours
