"""Synthetic hospitalized-diabetes cohorts and the glucose ground-truth oracle.

The dynamics are a deliberately small discrete-time model with hourly steps:

* an insulin-on-board compartment (bolus units plus basal units scaled by
  ``basal_potency``) and a carbs-on-board compartment, both emptying with
  first-order half-lives (2 h and 1 h by default);
* glucose relaxes toward a patient set point at rate ``endogenous_drift`` and
  is pushed down by absorbed insulin and up by absorbed carbohydrate::

      g' = g + drift * (set_point - g) - insulin_sensitivity * ins
             + carb_sensitivity * carbs / 10 + noise

  clamped to [1, 35] mmol/L.

None of this is meant as physiology; it is a calibrated environment whose
marginals (measurement times, dose ranges, injection counts) look like a
hospital ward, and which can replay any treatment plan as an oracle.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .rng import substream
from .trajectory import Context, Event, PatientRecord

GLUCOSE_CLAMP = (1.0, 35.0)


class SimulationError(RuntimeError):
    pass


class OracleInitError(SimulationError):
    """The context carries no measured glucose to start a rollout from."""


@dataclass(frozen=True)
class Phenotype:
    insulin_sensitivity: float  # mmol/L drop per absorbed unit
    carb_sensitivity: float     # mmol/L rise per 10 g absorbed
    endogenous_drift: float     # fraction of (set_point - g) recovered per hour
    set_point: float            # mmol/L
    noise_sd: float             # mmol/L per hour

    def __post_init__(self):
        if not (self.insulin_sensitivity > 0 and self.carb_sensitivity > 0):
            raise ValueError("sensitivities must be positive")
        if not 0 <= self.endogenous_drift < 1:
            raise ValueError("endogenous_drift must lie in [0, 1)")
        if not 6.0 <= self.set_point <= 12.0:
            raise ValueError("set_point must lie in [6, 12]")
        if self.noise_sd < 0:
            raise ValueError("noise_sd must be non-negative")

    def to_json(self) -> dict:
        return asdict(self)


# log-uniform sampling ranges for sample_phenotype
PHENOTYPE_RANGES = {
    "insulin_sensitivity": (0.15, 0.40),
    "carb_sensitivity": (0.50, 1.10),
    "endogenous_drift": (0.06, 0.20),
    "set_point": (6.5, 12.0),
    "noise_sd": (0.15, 0.45),
}


@dataclass(frozen=True)
class SimConfig:
    days: int = 4
    meal_hours: tuple[int, ...] = (7, 12, 18)
    measure_hours: tuple[int, ...] = (7, 12, 18, 22)
    carb_range: tuple[float, float] = (20.0, 70.0)
    basal_dose_range: tuple[int, int] = (2, 20)
    bolus_dose_range: tuple[int, int] = (0, 30)
    basal_hours: tuple[int, ...] = (7, 18)
    reporting_prob_carbs: float = 0.5
    meal_prob: float = 0.9
    measure_prob: float = 0.95
    # nocturnal spot check around 3 a.m. (ward practice for hypoglycaemia screening)
    night_check_hour: int = 3
    night_check_prob: float = 0.3
    basal_none_prob: float = 0.3
    basal_skip_prob: float = 0.05
    insulin_half_life: float = 2.0
    carb_half_life: float = 1.0
    basal_potency: float = 0.4
    correction_hour: int = 22
    correction_threshold: float = 11.0
    correction_dose: int = 2

    def __post_init__(self):
        if self.days < 1:
            raise ValueError("days must be >= 1")
        hours = (*self.meal_hours, *self.measure_hours, *self.basal_hours,
                 self.night_check_hour, self.correction_hour)
        if any(not 0 <= h < 24 for h in hours):
            raise ValueError("all clock hours must lie in [0, 24)")
        for lo, hi in (self.carb_range, self.basal_dose_range, self.bolus_dose_range):
            if lo > hi:
                raise ValueError("empty range in SimConfig")
        if not 0 <= self.reporting_prob_carbs <= 1:
            raise ValueError("reporting_prob_carbs must be a probability")

    def to_json(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_json(cls, obj: dict) -> "SimConfig":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in obj.items()})


def _log_uniform(rng: np.random.Generator, lo: float, hi: float) -> float:
    return float(math.exp(rng.uniform(math.log(lo), math.log(hi))))


def sample_phenotype(rng: np.random.Generator, config: SimConfig | None = None) -> Phenotype:
    """Draw a phenotype from the log-uniform ranges in ``PHENOTYPE_RANGES``."""
    return Phenotype(**{k: _log_uniform(rng, lo, hi) for k, (lo, hi) in PHENOTYPE_RANGES.items()})


def sample_static(rng: np.random.Generator) -> tuple[float, float, float]:
    """(age in years, weight in kg, type-2 flag)."""
    age = round(float(rng.uniform(35, 90)), 1)
    weight = round(float(rng.uniform(50, 120)), 1)
    type2 = float(rng.random() < 0.85)
    return age, weight, type2


def _absorb_fraction(half_life: float, dt: float = 1.0) -> float:
    return 1.0 - 2.0 ** (-dt / half_life)


def glucose_step(state, insulin_on_board, carbs_on_board, phenotype: Phenotype,
                 rng: np.random.Generator | None = None, dt: float = 1.0,
                 config: SimConfig | None = None):
    """Advance glucose by one step of ``dt`` hours.

    Works elementwise on scalars or equally shaped arrays. Doses for the
    current hour must already be added to the boards.

    Returns:
        (next_state, next_insulin_on_board, next_carbs_on_board)
    """
    cfg = config or SimConfig()
    g = np.asarray(state, dtype=float)
    iob = np.asarray(insulin_on_board, dtype=float)
    cob = np.asarray(carbs_on_board, dtype=float)
    if not (np.all(np.isfinite(g)) and np.all(np.isfinite(iob)) and np.all(np.isfinite(cob))):
        raise SimulationError("non-finite simulator input")
    if np.any(g <= 0):
        raise SimulationError("glucose state must be positive")
    ins = iob * _absorb_fraction(cfg.insulin_half_life, dt)
    carbs = cob * _absorb_fraction(cfg.carb_half_life, dt)
    nxt = (
        g
        + phenotype.endogenous_drift * dt * (phenotype.set_point - g)
        - phenotype.insulin_sensitivity * ins
        + phenotype.carb_sensitivity * carbs / 10.0
    )
    if phenotype.noise_sd > 0:
        if rng is None:
            raise SimulationError("an rng is required when noise_sd > 0")
        nxt = nxt + rng.normal(0.0, phenotype.noise_sd * math.sqrt(dt), size=g.shape)
    nxt = np.clip(nxt, *GLUCOSE_CLAMP)
    if nxt.ndim == 0:
        return float(nxt), float(iob - ins), float(cob - carbs)
    return nxt, iob - ins, cob - carbs


@dataclass(frozen=True)
class SlidingScalePolicy:
    """Ward sliding scale: bolus = clamp(round((g - 7) * 2 + carbs / 15), 0, 30)."""

    target: float = 7.0
    gain: float = 2.0
    carb_ratio: float = 15.0
    max_dose: int = 30

    def meal_bolus(self, glucose: float, carbs: float) -> int:
        raw = (glucose - self.target) * self.gain + carbs / self.carb_ratio
        return int(min(max(math.floor(raw + 0.5), 0), self.max_dose))


@dataclass(frozen=True, eq=False)
class SimulatedPatient:
    record: PatientRecord
    phenotype: Phenotype
    true_carbs: np.ndarray    # T, grams eaten per hour, reported or not
    true_glucose: np.ndarray  # T, state at the start of each hour

    def sidecar(self) -> dict:
        return {
            "id": self.record.id,
            "phenotype": self.phenotype.to_json(),
            "true_carbs": [float(c) for c in self.true_carbs],
        }


def _jitter(rng: np.random.Generator) -> int:
    return int(rng.choice([-1, 0, 1], p=[0.15, 0.6, 0.25]))


def simulate_patient(phenotype: Phenotype, config: SimConfig, policy: SlidingScalePolicy | None,
                     rng: np.random.Generator, patient_id: str = "p0",
                     static: tuple[float, ...] | None = None) -> SimulatedPatient:
    """Simulate one admission starting at midnight."""
    policy = policy or SlidingScalePolicy()
    static = static if static is not None else sample_static(rng)
    T = 24 * config.days
    events: list[Event] = []

    if rng.random() < config.basal_none_prob:
        basal_hour, basal_dose = None, 0
    else:
        basal_hour = int(rng.choice(config.basal_hours))
        lo, hi = config.basal_dose_range
        basal_dose = int(np.clip(rng.integers(4, 17), lo, hi))

    # plan measurement hours per day
    measure_at: set[int] = set()
    for day in range(config.days):
        for h in config.measure_hours:
            if rng.random() < config.measure_prob:
                measure_at.add(day * 24 + h + _jitter(rng))
        if rng.random() < config.night_check_prob:
            measure_at.add(day * 24 + config.night_check_hour + _jitter(rng))
    measure_at = {t for t in measure_at if 0 <= t < T}

    g = float(np.clip(phenotype.set_point + rng.normal(0, 1.0), 3.0, 20.0))
    iob = cob = 0.0
    glucose = np.zeros(T)
    carbs_eaten = np.zeros(T)
    bolus_hours = set(config.meal_hours) | {config.correction_hour}
    for t in range(T):
        hour = t % 24
        glucose[t] = g
        if t in measure_at:
            events.append(Event(t + float(rng.uniform(0.0, 0.999)), "glucose",
                                round(min(max(g, 1.0), 35.0), 1)))
        carbs = 0.0
        if hour in config.meal_hours and rng.random() < config.meal_prob:
            lo, hi = config.carb_range
            carbs = float(5 * round(rng.uniform(lo, hi) / 5))
            carbs_eaten[t] = carbs
            if rng.random() < config.reporting_prob_carbs:
                events.append(Event(t + float(rng.uniform(0.0, 0.999)), "carbs", carbs))
        bolus = 0
        if hour in config.meal_hours:
            bolus = policy.meal_bolus(g, carbs) if carbs > 0 else policy.meal_bolus(g, 0.0)
        elif hour == config.correction_hour and g > config.correction_threshold:
            bolus = config.correction_dose
        bolus = int(np.clip(bolus, *config.bolus_dose_range))
        if bolus > 0 and hour in bolus_hours:
            events.append(Event(t + float(rng.uniform(0.0, 0.999)), "bolus", float(bolus)))
        basal = 0
        if basal_hour is not None and hour == basal_hour and rng.random() >= config.basal_skip_prob:
            basal = basal_dose
            events.append(Event(t + float(rng.uniform(0.0, 0.999)), "basal", float(basal)))
        iob += bolus + config.basal_potency * basal
        cob += carbs
        g, iob, cob = glucose_step(g, iob, cob, phenotype, rng, config=config)

    events.sort(key=lambda e: (e.time_hours, e.kind))
    record = PatientRecord(
        id=patient_id,
        static_features=tuple(float(s) for s in static),
        events=tuple(events),
        horizon_hours=float(T),
    )
    return SimulatedPatient(record, phenotype, carbs_eaten, glucose)


def simulate_cohort(n_patients: int, config: SimConfig, seed: int,
                    policy: SlidingScalePolicy | None = None) -> list[SimulatedPatient]:
    """One independent rng stream per patient, so patients can be generated in any order."""
    out = []
    for i in range(n_patients):
        pheno = sample_phenotype(substream(seed, "phenotype", i), config)
        out.append(simulate_patient(pheno, config, policy, substream(seed, "patient", i),
                                    patient_id=f"p{i:05d}"))
    return out


def environment_rollout(phenotype: Phenotype, context: Context, treatment: np.ndarray,
                        carbs: np.ndarray, rng: np.random.Generator | None, S: int,
                        config: SimConfig | None = None,
                        past_carbs: np.ndarray | None = None) -> np.ndarray:
    """Replay a future treatment plan ``S`` times on the true dynamics.

    The rollout starts from the last measured glucose in the context, replays
    the remaining past hours with the recorded doses (and ``past_carbs`` if
    given, else the reported past carbohydrates), then applies ``treatment``
    (D x K, basal and bolus units) and ``carbs`` (V x K grams).

    Returns:
        Array of shape (S, 1, K) of glucose values in mmol/L.
    """
    cfg = config or SimConfig()
    treatment = np.asarray(treatment, dtype=float)
    carbs = np.asarray(carbs, dtype=float)
    K = context.K
    if treatment.shape != (2, K) or carbs.shape != (1, K):
        raise ValueError(f"expected treatment (2, {K}) and carbs (1, {K})")
    if np.any(treatment < 0) or np.any(treatment != np.round(treatment)):
        raise ValueError("treatments must be non-negative integers")
    measured = np.flatnonzero(context.past_mask[0])
    if measured.size == 0:
        raise OracleInitError("context has no measured glucose")
    m = int(measured[-1])
    n = context.past_length
    pc = context.past_covariates[0] if past_carbs is None else np.asarray(past_carbs, dtype=float)
    ins_all = np.concatenate([
        cfg.basal_potency * context.past_treatments[0] + context.past_treatments[1],
        cfg.basal_potency * treatment[0] + treatment[1],
    ])
    carb_all = np.concatenate([pc, carbs[0]])

    fi = _absorb_fraction(cfg.insulin_half_life)
    fc = _absorb_fraction(cfg.carb_half_life)
    iob0 = sum(ins_all[j] * (1 - fi) ** (m - j) for j in range(m))
    cob0 = sum(carb_all[j] * (1 - fc) ** (m - j) for j in range(m))
    g = np.full(S, float(context.past_outcomes[0, m]))
    iob = np.full(S, float(iob0))
    cob = np.full(S, float(cob0))
    out = np.empty((S, 1, K))
    for t in range(m, n + K - 1):
        iob = iob + ins_all[t]
        cob = cob + carb_all[t]
        g, iob, cob = glucose_step(g, iob, cob, phenotype, rng, config=cfg)
        if t + 1 >= n:
            out[:, 0, t + 1 - n] = g
    return out
