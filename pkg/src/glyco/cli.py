"""Command-line entry point: ``glyco <subcommand> [--config PATH] [--seed N] [--out DIR] ...``.

Subcommands run one pipeline stage each and write their artifact plus
``run_manifest.json`` into the output directory.  A run is fully
determined by its config and seed: rerunning it reproduces every primary
artifact byte for byte.  Exit status is 0 on success, 1 on invalid input
(bad flags, malformed config, incompatible checkpoint) and 2 on a runtime
failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import platform
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .decision import (DecisionResult, FinetuneConfig, SearchConfig, UtilityConfig, decide_direct,
                       decide_indirect, decide_joint, finetune_policy, joint_expected_utility)
from .evalharness import (compare_forecasts, evaluation_windows, oracles_from_patients, patient_splits,
                          policy_evaluation)
from .preprocess import ContainerError, InsufficientDataError, fit_scaler, read_dataset, resample_hourly, write_dataset
from .rng import substream
from .seqgen import (CheckpointError, ModeError, ModelConfig, load_checkpoint, save_checkpoint, train)
from .seqgen.sampling import Conditioner
from .sim import SimConfig, simulate_cohort
from .trajectory import RecordError, read_records, write_records

log = logging.getLogger("glyco")

APPROACHES = ("direct", "indirect", "joint")
QUANTILES = (0.05, 0.25, 0.5, 0.75, 0.95)


class ValidationError(Exception):
    """Bad user input; maps to exit status 1."""


@dataclass
class RunConfig:
    seed: int = 0
    paths: dict = field(default_factory=lambda: {"cohort": None, "oracle": None, "dataset": None,
                                                 "checkpoint": None, "out": "out"})
    n_patients: int = 100
    sim: SimConfig = field(default_factory=SimConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    utility: UtilityConfig = field(default_factory=UtilityConfig)
    decision: dict = field(default_factory=lambda: {"approach": "joint", "U": 100, "S": 200})
    eval: dict = field(default_factory=lambda: {"n_splits": 30})

    def to_json(self) -> dict:
        return {"seed": self.seed, "paths": dict(self.paths), "n_patients": self.n_patients,
                "sim": self.sim.to_json(), "model": self.model.to_json(),
                "utility": self.utility.to_json(), "decision": dict(self.decision),
                "eval": dict(self.eval)}

    @classmethod
    def from_json(cls, obj: dict) -> "RunConfig":
        known = {"seed", "paths", "n_patients", "sim", "model", "utility", "decision", "eval"}
        extra = set(obj) - known
        if extra:
            raise ValidationError(f"unknown config keys: {sorted(extra)}")
        base = cls()
        try:
            return cls(
                seed=_seed(obj.get("seed", base.seed)),
                paths={**base.paths, **obj.get("paths", {})},
                n_patients=int(obj.get("n_patients", base.n_patients)),
                sim=SimConfig.from_json(obj["sim"]) if "sim" in obj else base.sim,
                model=ModelConfig.from_json(obj["model"]) if "model" in obj else base.model,
                utility=UtilityConfig.from_json(obj["utility"]) if "utility" in obj else base.utility,
                decision={**base.decision, **obj.get("decision", {})},
                eval={**base.eval, **obj.get("eval", {})},
            )
        except (TypeError, ValueError) as exc:
            raise ValidationError(f"malformed config: {exc}") from None

    def digest(self) -> str:
        return hashlib.sha256(_dumps(self.to_json()).encode("utf-8")).hexdigest()


def _seed(v) -> int:
    v = int(v)
    if not 0 <= v < 2**64:
        raise ValidationError("seed must be a 64-bit unsigned integer")
    return v


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n"


def _write_text(path: Path, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return "" if not np.isfinite(v) else repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# -- argument parsing --------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ValidationError(message)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON run config")
    common.add_argument("--seed", type=int, help="root seed (overrides the config)")
    common.add_argument("--out", type=Path, help="output directory")

    parser = _Parser(prog="glyco", description="Glucose trajectory generation and insulin decisions.")
    parser.add_argument("--version", action="version", version=f"glyco {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("cohort", parents=[common], help="simulate a synthetic inpatient cohort")
    p.add_argument("--patients", type=int)
    p.add_argument("--days", type=int)

    p = sub.add_parser("preprocess", parents=[common], help="records to an hourly binary dataset")
    p.add_argument("--cohort", type=Path)

    p = sub.add_parser("train", parents=[common], help="fit the generative model")
    p.add_argument("--dataset", type=Path)
    p.add_argument("--steps", type=int)
    p.add_argument("--mode", choices=("parametric", "latent", "autoregressive"))

    p = sub.add_parser("predict", parents=[common], help="forecast quantiles for evaluation windows")
    p.add_argument("--dataset", type=Path)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--samples", type=int, default=200)

    p = sub.add_parser("decide", parents=[common], help="choose insulin for evaluation contexts")
    p.add_argument("--dataset", type=Path)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--approach", choices=APPROACHES)
    p.add_argument("--num-treatments", type=int, dest="U")
    p.add_argument("--num-outcomes", type=int, dest="S")
    p.add_argument("--max-contexts", type=int, default=10)

    p = sub.add_parser("evaluate", parents=[common], help="forecast metrics against baselines")
    p.add_argument("--dataset", type=Path)
    p.add_argument("--checkpoint", type=Path, help="score this model; otherwise train one per split")
    p.add_argument("--train-dataset", type=Path, help="patients for the population baseline")
    p.add_argument("--splits", type=int)
    p.add_argument("--oracle", type=Path, help="simulator sidecar for policy evaluation")
    p.add_argument("--policy-contexts", type=int, default=0)

    p = sub.add_parser("finetune", parents=[common], help="shift the treatment model towards higher utility")
    p.add_argument("--dataset", type=Path)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--max-contexts", type=int, default=50)
    return parser


def resolve_config(args) -> RunConfig:
    if args.config is not None:
        try:
            obj = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ValidationError(f"config file not found: {args.config}") from None
        except json.JSONDecodeError as exc:
            raise ValidationError(f"malformed config {args.config}: {exc}") from None
        if not isinstance(obj, dict):
            raise ValidationError("config must be a JSON object")
        cfg = RunConfig.from_json(obj)
    else:
        cfg = RunConfig()
    if args.seed is not None:
        cfg.seed = _seed(args.seed)
    if args.out is not None:
        cfg.paths["out"] = str(args.out)
    for key in ("cohort", "dataset", "checkpoint"):
        v = getattr(args, key, None)
        if v is not None:
            cfg.paths[key] = str(v)
    if getattr(args, "patients", None) is not None:
        cfg.n_patients = args.patients
    if getattr(args, "days", None) is not None:
        cfg.sim = SimConfig.from_json({**cfg.sim.to_json(), "days": args.days})
    if args.command == "train":
        changes = {k: getattr(args, k) for k in ("steps", "mode") if getattr(args, k) is not None}
        if changes:
            try:
                cfg.model = cfg.model.with_(**changes)
            except ValueError as exc:
                raise ValidationError(str(exc)) from None
    if args.command == "decide":
        for k in ("approach", "U", "S"):
            if getattr(args, k) is not None:
                cfg.decision[k] = getattr(args, k)
    if args.command == "evaluate" and args.splits is not None:
        cfg.eval["n_splits"] = args.splits
    return cfg


def _need(cfg: RunConfig, key: str) -> Path:
    v = cfg.paths.get(key)
    if not v:
        raise ValidationError(f"missing --{key}")
    p = Path(v)
    if not p.exists():
        raise ValidationError(f"{key} not found: {p}")
    return p


def _load_model(cfg: RunConfig):
    try:
        return load_checkpoint(_need(cfg, "checkpoint"))
    except CheckpointError as exc:
        raise ValidationError(str(exc)) from None


def _load_dataset(path: Path):
    try:
        grids, scaler, _ = read_dataset(path)
    except ContainerError as exc:
        raise ValidationError(str(exc)) from None
    return grids


# -- subcommands --------------------------------------------------------------------------

def cmd_cohort(cfg: RunConfig, args, out: Path) -> dict:
    if cfg.n_patients < 1:
        raise ValidationError("--patients must be positive")
    patients = simulate_cohort(cfg.n_patients, cfg.sim, cfg.seed)
    write_records(out / "cohort.jsonl", [p.record for p in patients])
    _write_text(out / "oracle.jsonl", "".join(json.dumps(p.sidecar(), sort_keys=True) + "\n" for p in patients))
    return {"cohort": out / "cohort.jsonl", "oracle": out / "oracle.jsonl"}


def cmd_preprocess(cfg: RunConfig, args, out: Path) -> dict:
    try:
        records = read_records(_need(cfg, "cohort"))
    except RecordError as exc:
        raise ValidationError(str(exc)) from None
    grids = []
    for r in records:
        try:
            grids.append(resample_hourly(r))
        except InsufficientDataError as exc:
            log.warning("skipping %s: %s", r.id, exc)
    if not grids:
        raise ValidationError("no usable records")
    write_dataset(out / "dataset.glyd", grids, fit_scaler(grids))
    return {"dataset": out / "dataset.glyd"}


def _train_val_split(grids, seed: int):
    perm = substream(seed, "train-val").permutation(len(grids))
    n_val = max(1, len(grids) // 10)
    return [grids[i] for i in sorted(perm[n_val:])], [grids[i] for i in sorted(perm[:n_val])]


def cmd_train(cfg: RunConfig, args, out: Path) -> dict:
    grids = _load_dataset(_need(cfg, "dataset"))
    tr, va = _train_val_split(grids, cfg.seed)
    try:
        res = train(tr, cfg.model, cfg.seed, val_grids=va)
    except ValueError as exc:
        raise ValidationError(str(exc)) from None
    save_checkpoint(out / "model.ckpt", res.params)
    _write_csv(out / "loss_trace.csv", ["step", "train_loss", "val_loss"],
               [(r["step"], r.get("train", float("nan")), r.get("val", float("nan"))) for r in res.trace])
    return {"checkpoint": out / "model.ckpt", "loss_trace": out / "loss_trace.csv"}


def cmd_predict(cfg: RunConfig, args, out: Path) -> dict:
    params = _load_model(cfg)
    grids = _load_dataset(_need(cfg, "dataset"))
    if args.samples < 1:
        raise ValidationError("--samples must be positive")
    rows = []
    for i, w in enumerate(evaluation_windows(grids, params.config.K)):
        cond = Conditioner(w.context, params)
        y = cond.sample_outcomes(w.future_treatments, args.samples, substream(cfg.seed, "predict", i))
        q = np.quantile(y[:, 0, :], QUANTILES, axis=0)
        for k in range(w.K):
            truth = w.future_outcomes[0, k] if w.future_mask[0, k] else float("nan")
            rows.append([w.context.patient_id, w.context.t_split, k + 1, *q[:, k], truth])
    _write_csv(out / "predictions.csv",
               ["patient", "t_split", "hours_ahead", *[f"q{int(q * 100):02d}" for q in QUANTILES], "observed"], rows)
    return {"predictions": out / "predictions.csv"}


def _decider(cfg: RunConfig, params, seed: int, label: str):
    approach, U, S = cfg.decision["approach"], int(cfg.decision["U"]), int(cfg.decision["S"])
    if approach not in APPROACHES:
        raise ValidationError(f"approach must be one of {APPROACHES}")
    if U < 1 or S < 1:
        raise ValidationError("--num-treatments and --num-outcomes must be positive")

    def decide(ctx, i) -> DecisionResult:
        rng = substream(seed, label, i)
        if approach == "direct":
            return decide_direct(ctx, params, cfg.utility, S, rng)
        if approach == "indirect":
            return decide_indirect(ctx, params, cfg.utility, SearchConfig(S=S), rng)
        return decide_joint(ctx, params, cfg.utility, U, S, rng)

    return decide


def cmd_decide(cfg: RunConfig, args, out: Path) -> dict:
    params = _load_model(cfg)
    grids = _load_dataset(_need(cfg, "dataset"))
    ws = evaluation_windows(grids, params.config.K)[: args.max_contexts]
    decide = _decider(cfg, params, cfg.seed, "decide")
    lines = []
    for i, w in enumerate(ws):
        res = decide(w.context, i)
        lines.append(json.dumps({"patient": w.context.patient_id, "t_split": w.context.t_split,
                                 "approach": cfg.decision["approach"], **res.to_json()}, sort_keys=True))
    _write_text(out / "decisions.jsonl", "".join(line + "\n" for line in lines))
    return {"decisions": out / "decisions.jsonl"}


def cmd_evaluate(cfg: RunConfig, args, out: Path) -> dict:
    grids = _load_dataset(_need(cfg, "dataset"))
    artifacts = {}
    if cfg.paths.get("checkpoint"):
        params = _load_model(cfg)
        ref = _load_dataset(Path(args.train_dataset)) if args.train_dataset else grids
        comps = [(-1, compare_forecasts(params, ref, grids, rng=substream(cfg.seed, "forecast")))]
    else:
        n = int(cfg.eval["n_splits"])
        if n < 1:
            raise ValidationError("--splits must be positive")
        comps = []
        for s, (tr, te) in enumerate(patient_splits(len(grids), n, cfg.seed)):
            tr_g, te_g = [grids[i] for i in tr], [grids[i] for i in te]
            fit, va = _train_val_split(tr_g, cfg.seed + s)
            params = train(fit, cfg.model, cfg.seed, val_grids=va).params
            comps.append((s, compare_forecasts(params, tr_g, te_g, s, substream(cfg.seed, "forecast", s))))
    doc = {"splits": [{"split_id": s, **c.to_json()} for s, c in comps]}
    doc["mean"] = {k: {"mae": float(np.mean([getattr(c, k).mae for _, c in comps])),
                       "rmse": float(np.mean([getattr(c, k).rmse for _, c in comps]))}
                   for k in ("model", "patient_mean", "population_time")}
    rows = []
    for s, c in comps:
        for k in range(c.model.horizon_profile.shape[0]):
            rows.append([s, k + 1, *(getattr(c, m).horizon_profile[k, j]
                                     for m in ("model", "patient_mean", "population_time") for j in (0, 1))])
    _write_csv(out / "horizon_profile.csv",
               ["split", "hours_ahead", "model_mae", "model_rmse", "patient_mean_mae", "patient_mean_rmse",
                "population_time_mae", "population_time_rmse"], rows)
    artifacts["horizon_profile"] = out / "horizon_profile.csv"

    if cfg.paths.get("checkpoint"):
        artifacts["calibration"] = _calibration(params, grids, cfg.seed, out)
        if args.policy_contexts > 0:
            doc["policy"] = _policy(cfg, params, grids, args, out)
            artifacts["candidate_eu"] = out / "candidate_eu.csv"
    _write_text(out / "metrics.json", _dumps(doc))
    artifacts["metrics"] = out / "metrics.json"
    return artifacts


def _calibration(params, grids, seed: int, out: Path, max_windows: int = 50, S: int = 100) -> Path:
    """Histogram of probability-integral-transform values of observed glucose."""
    pits = []
    for i, w in enumerate(evaluation_windows(grids, params.config.K)[:max_windows]):
        y = Conditioner(w.context, params).sample_outcomes(w.future_treatments, S, substream(seed, "pit", i))
        m = w.future_mask[0]
        pits.extend((y[:, 0, m] <= w.future_outcomes[0, m]).mean(axis=0))
    counts, edges = np.histogram(pits, bins=10, range=(0.0, 1.0))
    path = out / "calibration.csv"
    _write_csv(path, ["bin_low", "bin_high", "count"], zip(edges[:-1], edges[1:], counts))
    return path


def _policy(cfg: RunConfig, params, grids, args, out: Path) -> dict:
    if not args.oracle:
        raise ValidationError("--policy-contexts needs --oracle")
    sidecars = [json.loads(line) for line in Path(args.oracle).read_text(encoding="utf-8").splitlines() if line]
    oracles = oracles_from_patients(sidecars)
    ctxs = [w.context for w in evaluation_windows(grids, params.config.K)
            if w.context.patient_id in oracles][: args.policy_contexts]
    decide = _decider(cfg, params, cfg.seed, "policy")
    results = {}
    report = policy_evaluation(lambda c, i: results.setdefault(i, decide(c, i)), ctxs, oracles, cfg.seed,
                               ucfg=cfg.utility, sim_config=cfg.sim)
    _write_csv(out / "candidate_eu.csv", ["context", "candidate", "eu", "chosen"],
               [(i, j, eu, int(j == r.candidate_index))
                for i, r in sorted(results.items()) for j, eu in enumerate(r.per_candidate_eu)])
    return report.to_json()


def cmd_finetune(cfg: RunConfig, args, out: Path) -> dict:
    params = _load_model(cfg)
    grids = _load_dataset(_need(cfg, "dataset"))
    if not 0.0 <= args.alpha <= 1.0:
        raise ValidationError("--alpha must lie in [0, 1]")
    tr, va = _train_val_split(grids, cfg.seed)
    ctxs = [w.context for w in evaluation_windows(tr, params.config.K)][: args.max_contexts]
    if not ctxs:
        raise ValidationError("no contexts to fine-tune on")
    try:
        res = finetune_policy(params, ctxs, cfg.utility, args.alpha, args.steps,
                              substream(cfg.seed, "finetune"), train_grids=tr)
    except ModeError as exc:
        raise ValidationError(str(exc)) from None
    save_checkpoint(out / "model_finetuned.ckpt", res.params)
    _write_csv(out / "finetune_trace.csv", ["step", "mean_eu", "nll"],
               [(r["step"], r.get("eu", float("nan")), r.get("nll", float("nan"))) for r in res.trace])
    return {"checkpoint": out / "model_finetuned.ckpt", "finetune_trace": out / "finetune_trace.csv"}


COMMANDS = {"cohort": cmd_cohort, "preprocess": cmd_preprocess, "train": cmd_train,
            "predict": cmd_predict, "decide": cmd_decide, "evaluate": cmd_evaluate,
            "finetune": cmd_finetune}


def _versions() -> dict:
    import scipy
    import sklearn
    return {"glyco": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "scikit-learn": sklearn.__version__, "python": platform.python_version()}


def _configure_logging() -> None:
    level = os.environ.get("GLYCO_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(level=levels.get(level, logging.ERROR), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _configure_logging()
    try:
        args = build_parser().parse_args(argv)
        cfg = resolve_config(args)
        out = Path(cfg.paths["out"])
        out.mkdir(parents=True, exist_ok=True)
        t0 = time.perf_counter()
        artifacts = COMMANDS[args.command](cfg, args, out)
        manifest = {
            "subcommand": args.command,
            "argv": list(sys.argv[1:] if argv is None else argv),
            "config": cfg.to_json(),
            "config_sha256": cfg.digest(),
            "seed": cfg.seed,
            "versions": _versions(),
            "wall_time_s": round(time.perf_counter() - t0, 3),
            "artifacts": {k: {"path": str(p), "sha256": _sha256(p)} for k, p in sorted(artifacts.items())},
        }
        _write_text(out / "run_manifest.json", _dumps(manifest))
    except ValidationError as exc:
        print(f"glyco: error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except Exception as exc:  # noqa: BLE001 - every other failure is a runtime error
        log.debug("runtime failure", exc_info=True)
        print(f"glyco: runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
