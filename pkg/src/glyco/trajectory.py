"""Canonical data model: irregular patient records, hourly grids and windows.

Array layout follows the channel-major convention ``(channels, time)``:
outcomes are ``P x T`` (glucose, mmol/L), treatments ``D x T`` (basal, bolus
insulin units) and covariates ``V x T`` (carbohydrates, grams).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

EVENT_KINDS = ("glucose", "basal", "bolus", "carbs")
TREATMENT_KINDS = ("basal", "bolus")
GLUCOSE_BOUNDS = (0.0, 50.0)


class WindowBoundsError(ValueError):
    """Raised when a requested past/future split does not fit the grid."""


class RecordError(ValueError):
    """Raised for malformed patient records."""


@dataclass(frozen=True)
class Event:
    time_hours: float
    kind: str
    value: float

    def __post_init__(self):
        if self.kind not in EVENT_KINDS:
            raise RecordError(f"unknown event kind {self.kind!r}")
        if not (self.time_hours >= 0 and math.isfinite(self.time_hours)):
            raise RecordError(f"event time must be finite and >= 0, got {self.time_hours}")
        if not (self.value >= 0 and math.isfinite(self.value)):
            raise RecordError(f"event value must be finite and >= 0, got {self.value}")
        if self.kind in TREATMENT_KINDS and self.value != int(self.value):
            raise RecordError(f"{self.kind} doses are integer units, got {self.value}")
        if self.kind == "glucose" and not (GLUCOSE_BOUNDS[0] < self.value < GLUCOSE_BOUNDS[1]):
            raise RecordError(f"glucose {self.value} outside sanity bounds {GLUCOSE_BOUNDS}")


@dataclass(frozen=True)
class PatientRecord:
    id: str
    static_features: tuple[float, ...]
    events: tuple[Event, ...]
    horizon_hours: float

    def __post_init__(self):
        if not self.horizon_hours > 0:
            raise RecordError("horizon_hours must be positive")
        times = [e.time_hours for e in self.events]
        if any(b < a for a, b in zip(times, times[1:])):
            raise RecordError(f"events of {self.id} are not time-sorted")
        if times and times[-1] > self.horizon_hours:
            raise RecordError(f"event after horizon in record {self.id}")

    def events_of(self, kind: str) -> list[Event]:
        return [e for e in self.events if e.kind == kind]

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "static": list(self.static_features),
            "horizon_hours": self.horizon_hours,
            "events": [{"t": e.time_hours, "kind": e.kind, "value": e.value} for e in self.events],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "PatientRecord":
        try:
            events = tuple(
                Event(float(e["t"]), str(e["kind"]), float(e["value"])) for e in obj["events"]
            )
            return cls(
                id=str(obj["id"]),
                static_features=tuple(float(s) for s in obj["static"]),
                events=events,
                horizon_hours=float(obj["horizon_hours"]),
            )
        except KeyError as exc:
            raise RecordError(f"record is missing field {exc}") from None


def write_records(path, records: Iterable[PatientRecord]) -> None:
    """Write records as JSONL (UTF-8, LF line endings)."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json(), separators=(",", ":")) + "\n")


def read_records(path) -> list[PatientRecord]:
    out = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise RecordError(f"{path}:{lineno}: {exc}") from None
        out.append(PatientRecord.from_json(obj))
    return out


@dataclass(frozen=True, eq=False)
class Grid:
    """Hourly grid for one patient. Raw (unscaled) units unless noted."""

    outcomes: np.ndarray        # P x T
    treatments: np.ndarray      # D x T, integer insulin units stored as float
    covariates: np.ndarray      # V x T
    outcome_mask: np.ndarray    # P x T, True where measured
    hours_of_day: np.ndarray    # T, int
    static_features: np.ndarray = field(default_factory=lambda: np.zeros(3))
    patient_id: str = ""

    def __post_init__(self):
        T = self.hours_of_day.shape[0]
        for name in ("outcomes", "treatments", "covariates", "outcome_mask"):
            arr = getattr(self, name)
            if arr.ndim != 2 or arr.shape[1] != T:
                raise ValueError(f"{name} has shape {arr.shape}, expected (*, {T})")
        if self.outcome_mask.shape != self.outcomes.shape:
            raise ValueError("outcome_mask must match outcomes")
        if not np.all(np.isfinite(self.outcomes[self.outcome_mask])):
            raise ValueError("measured outcomes must be finite")
        if np.any(self.treatments < 0):
            raise ValueError("treatments must be non-negative")
        for arr in (self.outcomes, self.treatments, self.covariates, self.outcome_mask,
                    self.hours_of_day, self.static_features):
            arr.setflags(write=False)

    @property
    def T(self) -> int:
        return int(self.hours_of_day.shape[0])

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.outcomes.shape[0], self.treatments.shape[0], self.covariates.shape[0]


@dataclass(frozen=True, eq=False)
class Context:
    """Everything known at decision time for one prediction window."""

    past_outcomes: np.ndarray      # P x n
    past_mask: np.ndarray          # P x n
    past_treatments: np.ndarray    # D x n
    past_covariates: np.ndarray    # V x n
    future_covariates: np.ndarray  # V x K
    static_features: np.ndarray
    past_hours: np.ndarray         # n
    future_hours: np.ndarray       # K
    patient_id: str = ""
    t_split: int = 0

    @property
    def past_length(self) -> int:
        return int(self.past_hours.shape[0])

    @property
    def K(self) -> int:
        return int(self.future_hours.shape[0])


@dataclass(frozen=True, eq=False)
class Window:
    context: Context
    future_outcomes: np.ndarray    # P x K
    future_treatments: np.ndarray  # D x K
    future_mask: np.ndarray        # P x K

    @property
    def K(self) -> int:
        return self.context.K


def split_window(grid: Grid, t_split: int, K: int) -> Window:
    """Split ``grid`` into the past ``[0, t_split)`` and the future ``[t_split, t_split+K)``."""
    T = grid.T
    if K < 1 or t_split < 1 or t_split + K > T:
        raise WindowBoundsError(f"t_split={t_split}, K={K} does not fit a grid of length {T}")
    past = slice(0, t_split)
    fut = slice(t_split, t_split + K)
    ctx = Context(
        past_outcomes=grid.outcomes[:, past],
        past_mask=grid.outcome_mask[:, past],
        past_treatments=grid.treatments[:, past],
        past_covariates=grid.covariates[:, past],
        future_covariates=grid.covariates[:, fut],
        static_features=grid.static_features,
        past_hours=grid.hours_of_day[past],
        future_hours=grid.hours_of_day[fut],
        patient_id=grid.patient_id,
        t_split=t_split,
    )
    return Window(
        context=ctx,
        future_outcomes=grid.outcomes[:, fut],
        future_treatments=grid.treatments[:, fut],
        future_mask=grid.outcome_mask[:, fut],
    )


def moving_windows(grid: Grid, K: int = 24, stride: int = 1) -> list[Window]:
    """All windows with ``t_split = 1, 1+stride, ..., T-K``.

    Returns an empty list when ``T <= K`` (no admissible split).
    """
    if K < 1 or stride < 1:
        raise ValueError("K and stride must be positive")
    return [split_window(grid, t, K) for t in range(1, grid.T - K + 1, stride)]


def aligned_windows(grid: Grid, K: int = 24, hour: int = 0, min_past: int = 24) -> list[Window]:
    """Windows whose future starts at clock ``hour`` with at least ``min_past`` hours of history."""
    splits = [t for t in range(max(min_past, 1), grid.T - K + 1) if grid.hours_of_day[t] == hour]
    return [split_window(grid, t, K) for t in splits]


def iter_windows(grids: Sequence[Grid], K: int, stride: int = 1) -> Iterator[Window]:
    for g in grids:
        yield from moving_windows(g, K, stride)
