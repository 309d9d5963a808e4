"""Mini-batch training with best-validation selection.

Each step draws ``batch`` distinct patients and, per patient,
``windows_per_patient`` moving windows (or one teacher-forced chunk in
autoregressive mode).  Validation batches are fixed once per run so the
selection criterion is comparable across evaluations.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .. import diffnum as dn
from ..preprocess import ScalerParams, fit_scaler
from ..rng import substream
from ..trajectory import Grid
from .batching import Batch, PreparedGrid, ar_batch_from_prepared, prepare_grid, window_batch_from_prepared
from .config import ModelConfig
from .model import ModelParams, init_model
from .objectives import objective

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainResult:
    params: ModelParams
    trace: list[dict] = field(default_factory=list)
    best_step: int = 0
    best_val: float = math.inf

    @property
    def train_losses(self) -> np.ndarray:
        return np.array([r["train"] for r in self.trace if "train" in r])

    @property
    def val_trace(self) -> list[tuple[int, float]]:
        return [(r["step"], r["val"]) for r in self.trace if "val" in r]


def _usable(pg: PreparedGrid, cfg: ModelConfig) -> bool:
    return pg.T >= (2 if cfg.mode == "autoregressive" else cfg.K + 1)


def _chunk_len(cfg: ModelConfig) -> int:
    return cfg.history + 1


def sample_batch(pgs: Sequence[PreparedGrid], cfg: ModelConfig, rng: np.random.Generator,
                 n_patients: int | None = None) -> Batch:
    """Random training batch: distinct patients, random window positions."""
    n = min(len(pgs), n_patients or cfg.batch)
    idx = rng.choice(len(pgs), size=n, replace=False)
    if cfg.mode == "autoregressive":
        items = []
        for i in idx:
            pg = pgs[i]
            c = min(pg.T, _chunk_len(cfg))
            s = int(rng.integers(0, pg.T - c + 1))
            items.append((pg, s, c))
        return ar_batch_from_prepared(items, cfg)
    items = []
    for i in idx:
        pg = pgs[i]
        ts = rng.integers(1, pg.T - cfg.K + 1, size=cfg.windows_per_patient)
        items.extend((pg, int(t)) for t in ts)
    return window_batch_from_prepared(items, cfg)


def validation_batches(pgs: Sequence[PreparedGrid], cfg: ModelConfig, rng: np.random.Generator,
                       size: int = 64) -> list[Batch]:
    """Fixed evaluation batches covering up to ``max_val_windows`` windows or chunks."""
    if cfg.mode == "autoregressive":
        items = []
        for pg in pgs:
            c = _chunk_len(cfg)
            starts = range(0, max(1, pg.T - c + 1), c) if pg.T >= c else [0]
            items.extend((pg, s, min(c, pg.T - s)) for s in starts)
        build = lambda chunk: ar_batch_from_prepared(chunk, cfg)
    else:
        items = [(pg, t) for pg in pgs for t in range(1, pg.T - cfg.K + 1)]
        build = lambda chunk: window_batch_from_prepared(chunk, cfg)
    if len(items) > cfg.max_val_windows:
        keep = np.sort(rng.choice(len(items), size=cfg.max_val_windows, replace=False))
        items = [items[i] for i in keep]
    return [build(items[s:s + size]) for s in range(0, len(items), size)]


def evaluate_loss(params: ModelParams, batches: Sequence[Batch], seed: int = 0) -> float:
    """Mean per-window (or per-sequence) loss over fixed batches."""
    total, count = 0.0, 0
    with dn.no_grad():
        for i, b in enumerate(batches):
            rng = substream(seed, "val-noise", i)
            total += objective(b, params, rng).item() * b.size
            count += b.size
    return total / count


def _treatment_bias(grids: Sequence[Grid]) -> np.ndarray:
    x = np.concatenate([g.treatments for g in grids], axis=1)
    return np.log(np.maximum(x.mean(axis=1), 1e-3))


def train(train_grids: Sequence[Grid], config: ModelConfig, seed: int,
          val_grids: Sequence[Grid] | None = None, scaler: ScalerParams | None = None,
          init: ModelParams | None = None,
          callback: Callable[[dict], None] | None = None) -> TrainResult:
    """Fit a model and return the parameters with the lowest validation loss.

    Args:
        train_grids: unscaled hourly grids; at least ``config.batch`` usable patients.
        config: architecture, mode and optimisation settings.
        seed: root seed; initialisation, batches and latent noise use separate substreams.
        val_grids: held-out patients for model selection; defaults to the training set.
        scaler: defaults to one fitted on ``train_grids``.
        init: warm start (its arrays are used; its config must match in shape).

    Raises:
        ValueError: too few usable patients.
        TrainingDivergedError: a non-finite loss or gradient.
    """
    scaler = scaler or fit_scaler(train_grids)
    pgs = [pg for pg in (prepare_grid(g, scaler, config) for g in train_grids) if _usable(pg, config)]
    if len(pgs) < config.batch:
        raise ValueError(f"need at least {config.batch} usable patients, got {len(pgs)}")
    vpgs = [pg for pg in (prepare_grid(g, scaler, config) for g in (val_grids or train_grids))
            if _usable(pg, config)]
    val_batches = validation_batches(vpgs, config, substream(seed, "val-select"))

    if init is None:
        params = init_model(config, scaler, substream(seed, "init"))
        arrays = dict(params.arrays)
        arrays["trt.head.b"] = _treatment_bias(train_grids)
        params = params.with_arrays(arrays)
    else:
        params = ModelParams(dict(init.arrays), scaler, config, meta=dict(init.meta))

    batch_rng = substream(seed, "batches")
    noise_rng = substream(seed, "latent-noise")
    state = dn.adam_init(params.arrays)
    result = TrainResult(params)
    best_arrays = dict(params.arrays)

    def check_val(step):
        val = evaluate_loss(params, val_batches, seed)
        if val < result.best_val:
            result.best_val, result.best_step = val, step
            best_arrays.update(params.arrays)
        return val

    result.trace.append({"step": 0, "val": check_val(0)})
    for step in range(1, config.steps + 1):
        batch = sample_batch(pgs, config, batch_rng)
        tensors = {k: dn.Tensor(v, requires_grad=True, name=k) for k, v in params.arrays.items()}
        try:
            loss = objective(batch, params, noise_rng, tensors)
            loss.backward()
        except dn.NonFiniteError as exc:
            raise TrainingDivergedError(f"non-finite value at step {step}: {exc}") from exc
        grads = {k: t.grad for k, t in tensors.items() if t.grad is not None}
        if not all(np.all(np.isfinite(g)) for g in grads.values()):
            raise TrainingDivergedError(f"non-finite gradient at step {step}")
        new_arrays, state = dn.adam_step(params.arrays, grads, state, lr=config.lr)
        params = params.with_arrays(new_arrays)
        rec = {"step": step, "train": loss.item()}
        if step % config.eval_every == 0 or step == config.steps:
            rec["val"] = check_val(step)
            log.info("step %d train %.4f val %.4f", step, rec["train"], rec["val"])
        result.trace.append(rec)
        if callback:
            callback(rec)
    result.params = params.with_arrays(best_arrays, trained=True,
                                       meta={**params.meta, "best_step": result.best_step,
                                             "best_val": result.best_val, "seed": int(seed)})
    return result
