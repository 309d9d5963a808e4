"""Irregular records to hourly grids, scaling, and the binary dataset container.

Container layout (all integers little-endian)::

    8 bytes   magic  b"GLYDSET1"
    8 bytes   uint64 manifest length n
    n bytes   UTF-8 JSON manifest
    ...       float64 blocks ("outcomes", "treatments", "covariates",
              "hours_of_day", "static"), each the concatenation over patients
    ...       mask block: outcome masks concatenated and bit-packed
              (little bit order)

Block offsets in the manifest are relative to the first byte after the
manifest. Patient ``i`` occupies ``time_offset[i] : time_offset[i] + T[i]``
along the time axis of every temporal block.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .trajectory import Grid, PatientRecord

MAGIC = b"GLYDSET1"
FORMAT_VERSION = 1
P, D, V = 1, 2, 1
_TREATMENT_ROW = {"basal": 0, "bolus": 1}


class InsufficientDataError(ValueError):
    pass


class ContainerError(ValueError):
    pass


def _hour_bin(t: float, T: int) -> int:
    # events exactly at the horizon belong to the last hour
    return min(int(math.floor(t)), T - 1)


def resample_hourly(record: PatientRecord) -> Grid:
    """Hourly grid: glucose linearly imputed, doses and carbs summed per hour.

    Several glucose readings inside one hour are averaged. Before the first and
    after the last reading the value is held constant. Only hours holding a
    real reading are marked in the mask.
    """
    T = int(math.ceil(record.horizon_hours))
    glucose = record.events_of("glucose")
    if len(glucose) < 2:
        raise InsufficientDataError(f"record {record.id} has fewer than 2 glucose readings")
    sums = np.zeros(T)
    counts = np.zeros(T)
    for e in glucose:
        h = _hour_bin(e.time_hours, T)
        sums[h] += e.value
        counts[h] += 1
    measured = counts > 0
    idx = np.flatnonzero(measured)
    y = np.interp(np.arange(T), idx, sums[idx] / counts[idx])

    x = np.zeros((D, T))
    v = np.zeros((V, T))
    for e in record.events:
        if e.kind in _TREATMENT_ROW:
            x[_TREATMENT_ROW[e.kind], _hour_bin(e.time_hours, T)] += e.value
        elif e.kind == "carbs":
            v[0, _hour_bin(e.time_hours, T)] += e.value
    return Grid(
        outcomes=y[None, :],
        treatments=x,
        covariates=v,
        outcome_mask=measured[None, :],
        hours_of_day=np.arange(T) % 24,
        static_features=np.asarray(record.static_features, dtype=float),
        patient_id=record.id,
    )


@dataclass(frozen=True)
class ScalerParams:
    outcome_mean: float
    outcome_sd: float
    treatment_sd: tuple[float, ...]
    covariate_sd: float
    static_mean: tuple[float, ...] = ()
    static_sd: tuple[float, ...] = ()

    def __post_init__(self):
        sds = (self.outcome_sd, *self.treatment_sd, self.covariate_sd, *self.static_sd)
        if any(not (s > 0) for s in sds):
            raise ValueError("scaler standard deviations must be strictly positive")

    @classmethod
    def identity(cls, D: int = D, n_static: int = 3) -> "ScalerParams":
        return cls(0.0, 1.0, (1.0,) * D, 1.0, (0.0,) * n_static, (1.0,) * n_static)

    def to_json(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_json(cls, obj: dict) -> "ScalerParams":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in obj.items()})


def _safe_sd(values: np.ndarray) -> float:
    sd = float(np.std(values)) if values.size else 0.0
    return sd if sd > 0 and math.isfinite(sd) else 1.0


def fit_scaler(grids: Sequence[Grid]) -> ScalerParams:
    """Outcome statistics over measured cells only; dose/carb sds over all cells."""
    if not grids:
        raise ValueError("cannot fit a scaler on an empty dataset")
    y = np.concatenate([g.outcomes[g.outcome_mask] for g in grids])
    if y.size < 2:
        raise InsufficientDataError("need at least two measured outcomes to fit a scaler")
    x = np.concatenate([g.treatments for g in grids], axis=1)
    v = np.concatenate([g.covariates for g in grids], axis=1)
    s = np.stack([g.static_features for g in grids])
    return ScalerParams(
        outcome_mean=float(np.mean(y)),
        outcome_sd=_safe_sd(y),
        treatment_sd=tuple(_safe_sd(row) for row in x),
        covariate_sd=_safe_sd(v),
        static_mean=tuple(float(m) for m in s.mean(axis=0)),
        static_sd=tuple(_safe_sd(col) for col in s.T),
    )


def _static_arrays(params: ScalerParams, n: int) -> tuple[np.ndarray, np.ndarray]:
    if len(params.static_mean) != n:
        return np.zeros(n), np.ones(n)
    return np.asarray(params.static_mean), np.asarray(params.static_sd)


def apply_scaler(grid: Grid, params: ScalerParams) -> Grid:
    """Scaled copy of ``grid``. Treatments and carbs are only divided, so zeros stay zeros."""
    if len(params.treatment_sd) != grid.treatments.shape[0]:
        raise ValueError("scaler treatment channels do not match the grid")
    sm, ss = _static_arrays(params, grid.static_features.shape[0])
    return Grid(
        outcomes=(grid.outcomes - params.outcome_mean) / params.outcome_sd,
        treatments=grid.treatments / np.asarray(params.treatment_sd)[:, None],
        covariates=grid.covariates / params.covariate_sd,
        outcome_mask=grid.outcome_mask.copy(),
        hours_of_day=grid.hours_of_day.copy(),
        static_features=(grid.static_features - sm) / ss,
        patient_id=grid.patient_id,
    )


def invert_grid(grid: Grid, params: ScalerParams) -> Grid:
    sm, ss = _static_arrays(params, grid.static_features.shape[0])
    return Grid(
        outcomes=invert_scaler(grid.outcomes, params),
        treatments=invert_scaler(grid.treatments, params, "treatment"),
        covariates=invert_scaler(grid.covariates, params, "covariate"),
        outcome_mask=grid.outcome_mask.copy(),
        hours_of_day=grid.hours_of_day.copy(),
        static_features=grid.static_features * ss + sm,
        patient_id=grid.patient_id,
    )


def scale_values(values, params: ScalerParams, kind: str = "outcome") -> np.ndarray:
    values = np.asarray(values, dtype=float)
    if kind == "outcome":
        return (values - params.outcome_mean) / params.outcome_sd
    if kind == "treatment":
        sd = np.asarray(params.treatment_sd)
        if values.shape[-2] != sd.shape[0]:
            raise ValueError("treatment values must have D rows in the second-to-last axis")
        return values / sd[:, None]
    if kind == "covariate":
        return values / params.covariate_sd
    raise ValueError(f"unknown kind {kind!r}")


def invert_scaler(values, params: ScalerParams, kind: str = "outcome") -> np.ndarray:
    """Undo ``apply_scaler`` for outcome, treatment (rows = channels) or covariate arrays."""
    values = np.asarray(values, dtype=float)
    if kind == "outcome":
        return values * params.outcome_sd + params.outcome_mean
    if kind == "treatment":
        sd = np.asarray(params.treatment_sd)
        if values.shape[-2] != sd.shape[0]:
            raise ValueError("treatment values must have D rows in the second-to-last axis")
        return values * sd[:, None]
    if kind == "covariate":
        return values * params.covariate_sd
    raise ValueError(f"unknown kind {kind!r}")


# -- container -------------------------------------------------------------

_BLOCKS = ("outcomes", "treatments", "covariates", "hours_of_day", "static")


def write_dataset(path, grids: Sequence[Grid], scaler: ScalerParams | None = None) -> None:
    Ts = [g.T for g in grids]
    offsets = np.concatenate([[0], np.cumsum(Ts)]).astype(int)
    blocks = {
        "outcomes": np.concatenate([g.outcomes for g in grids], axis=1) if grids else np.zeros((P, 0)),
        "treatments": np.concatenate([g.treatments for g in grids], axis=1) if grids else np.zeros((D, 0)),
        "covariates": np.concatenate([g.covariates for g in grids], axis=1) if grids else np.zeros((V, 0)),
        "hours_of_day": np.concatenate([g.hours_of_day for g in grids]) if grids else np.zeros(0),
        "static": np.stack([g.static_features for g in grids]) if grids else np.zeros((0, 3)),
    }
    mask = np.concatenate([g.outcome_mask for g in grids], axis=1) if grids else np.zeros((P, 0), bool)
    payload = bytearray()
    table = {}
    for name in _BLOCKS:
        data = np.ascontiguousarray(blocks[name], dtype="<f8")
        table[name] = {"offset": len(payload), "shape": list(data.shape)}
        payload += data.tobytes()
    packed = np.packbits(mask.astype(np.uint8).ravel(), bitorder="little")
    table["outcome_mask"] = {"offset": len(payload), "shape": list(mask.shape), "packed_bytes": int(packed.size)}
    payload += packed.tobytes()
    manifest = {
        "format": "glyco-dataset",
        "version": FORMAT_VERSION,
        "P": P, "D": D, "V": V,
        "scaler": scaler.to_json() if scaler else None,
        "patients": [
            {"id": g.patient_id, "T": int(T), "time_offset": int(o)}
            for g, T, o in zip(grids, Ts, offsets[:-1])
        ],
        "blocks": table,
    }
    head = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        fh.write(bytes(payload))


def read_dataset(path) -> tuple[list[Grid], ScalerParams | None, dict]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != MAGIC:
        raise ContainerError(f"{path} is not a glyco dataset")
    (n,) = struct.unpack("<Q", raw[8:16])
    manifest = json.loads(raw[16:16 + n].decode("utf-8"))
    if manifest.get("version") != FORMAT_VERSION:
        raise ContainerError(f"unsupported dataset version {manifest.get('version')}")
    body = memoryview(raw)[16 + n:]
    table = manifest["blocks"]
    arrays = {}
    for name in _BLOCKS:
        shape = tuple(table[name]["shape"])
        count = int(np.prod(shape)) if shape else 0
        arrays[name] = np.frombuffer(body, dtype="<f8", count=count,
                                     offset=table[name]["offset"]).reshape(shape).astype(float)
    mt = table["outcome_mask"]
    mshape = tuple(mt["shape"])
    bits = np.frombuffer(body, dtype=np.uint8, count=mt["packed_bytes"], offset=mt["offset"])
    mask = np.unpackbits(bits, count=int(np.prod(mshape)), bitorder="little").astype(bool).reshape(mshape)
    grids = []
    for i, pat in enumerate(manifest["patients"]):
        sl = slice(pat["time_offset"], pat["time_offset"] + pat["T"])
        grids.append(Grid(
            outcomes=arrays["outcomes"][:, sl].copy(),
            treatments=arrays["treatments"][:, sl].copy(),
            covariates=arrays["covariates"][:, sl].copy(),
            outcome_mask=mask[:, sl].copy(),
            hours_of_day=arrays["hours_of_day"][sl].astype(int),
            static_features=arrays["static"][i].copy(),
            patient_id=pat["id"],
        ))
    scaler = ScalerParams.from_json(manifest["scaler"]) if manifest.get("scaler") else None
    return grids, scaler, manifest
