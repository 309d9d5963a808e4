import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from glyco.rng import substream
from glyco.sim import (OracleInitError, Phenotype, SimConfig, SimulationError, SlidingScalePolicy,
                       environment_rollout, glucose_step, sample_phenotype, simulate_cohort,
                       simulate_patient)
from glyco.trajectory import split_window

from conftest import make_grid

QUIET = Phenotype(insulin_sensitivity=0.3, carb_sensitivity=0.8, endogenous_drift=0.1, set_point=8.0,
                  noise_sd=0.0)


def test_phenotype_determinism():
    a = sample_phenotype(np.random.default_rng(0))
    b = sample_phenotype(np.random.default_rng(0))
    assert a == b


def test_phenotype_draws():
    rng = np.random.default_rng(1)
    draws = [sample_phenotype(rng) for _ in range(1000)]
    assert all(d.insulin_sensitivity > 0 and d.carb_sensitivity > 0 and d.noise_sd >= 0 for d in draws)
    assert all(6 <= d.set_point <= 12 for d in draws)
    # log-uniform on [6.5, 12] has mean (12 - 6.5) / ln(12 / 6.5) ~ 8.98
    assert 8 <= np.mean([d.set_point for d in draws]) <= 10


def test_step_fixed_point():
    g, iob, cob = glucose_step(8.0, 0.0, 0.0, QUIET)
    assert g == 8.0 and iob == 0.0 and cob == 0.0


def test_step_linear_relaxation():
    ph = dataclasses.replace(QUIET, endogenous_drift=0.5)
    g, _, _ = glucose_step(10.0, 0.0, 0.0, ph)
    assert g == pytest.approx(9.0)


def test_bolus_dip():
    ph = dataclasses.replace(QUIET, set_point=7.0)
    g, iob, cob = 7.0, 20.0, 0.0
    traj = []
    for _ in range(4):
        g, iob, cob = glucose_step(g, iob, cob, ph)
        traj.append(g)
    assert min(traj) < 3.9


def test_board_half_life():
    _, iob, cob = glucose_step(8.0, 16.0, 40.0, QUIET, dt=2.0)
    assert iob == pytest.approx(8.0)
    assert cob == pytest.approx(10.0)


def test_step_errors():
    with pytest.raises(SimulationError):
        glucose_step(float("nan"), 0.0, 0.0, QUIET)
    with pytest.raises(SimulationError):
        glucose_step(0.0, 0.0, 0.0, QUIET)
    with pytest.raises(SimulationError):
        glucose_step(8.0, 0.0, 0.0, dataclasses.replace(QUIET, noise_sd=0.2))


def test_step_clamps():
    g, _, _ = glucose_step(2.0, 200.0, 0.0, QUIET)
    assert g == 1.0


def test_sliding_scale():
    pol = SlidingScalePolicy()
    assert pol.meal_bolus(7.0, 0.0) == 0
    assert pol.meal_bolus(10.0, 45.0) == 9
    assert pol.meal_bolus(40.0, 70.0) == 30
    assert pol.meal_bolus(3.0, 0.0) == 0


def test_patient_determinism():
    cfg = SimConfig(days=2)
    a = simulate_patient(QUIET, cfg, None, substream(3, "p"), "x")
    b = simulate_patient(QUIET, cfg, None, substream(3, "p"), "x")
    assert a.record == b.record


def test_patient_emits_supported_events():
    cfg = SimConfig(days=3)
    for sp in simulate_cohort(20, cfg, seed=2):
        rec = sp.record
        assert rec.horizon_hours == 72
        for e in rec.events_of("glucose"):
            h = int(e.time_hours) % 24
            assert any(abs(h - m) <= 1 for m in (*cfg.measure_hours, cfg.night_check_hour))
        for e in rec.events_of("basal"):
            assert int(e.time_hours) % 24 in cfg.basal_hours
            assert 2 <= e.value <= 20
        for e in rec.events_of("bolus"):
            assert 0 < e.value <= 30


def test_invalid_config():
    with pytest.raises(ValueError):
        SimConfig(meal_hours=(25,))
    with pytest.raises(ValueError):
        SimConfig(carb_range=(70.0, 20.0))
    with pytest.raises(ValueError):
        SimConfig(days=0)


def _context(T=48, t=24):
    return split_window(make_grid(T=T), t, 24).context


def test_rollout_noise_free_identical():
    ctx = _context()
    x = np.zeros((2, 24))
    x[1, 7] = 5
    y = environment_rollout(QUIET, ctx, x, np.zeros((1, 24)), None, 5)
    assert y.shape == (5, 1, 24)
    assert np.all(y == y[0])


def test_rollout_relaxes_monotonically():
    ctx = split_window(make_grid(T=48, measure_every=1), 24, 24).context
    past = dataclasses.replace(ctx, past_treatments=np.zeros_like(ctx.past_treatments),
                               past_covariates=np.zeros_like(ctx.past_covariates))
    y = environment_rollout(QUIET, past, np.zeros((2, 24)), np.zeros((1, 24)), None, 1)[0, 0]
    dist = np.abs(y - QUIET.set_point)
    assert np.all(np.diff(dist) <= 1e-12)
    assert np.all(np.sign(y - QUIET.set_point) == np.sign(y[0] - QUIET.set_point))


def test_rollout_mc_mean_matches_noise_free():
    ph = dataclasses.replace(QUIET, noise_sd=0.3)
    ctx = _context()
    x = np.zeros((2, 24))
    x[1, [7, 12]] = 4
    carbs = np.zeros((1, 24))
    carbs[0, [7, 12]] = 40
    S = 10_000
    mc = environment_rollout(ph, ctx, x, carbs, np.random.default_rng(5), S)[:, 0].mean(axis=0)
    det = environment_rollout(QUIET, ctx, x, carbs, None, 1)[0, 0]
    steps = np.arange(1, 25) + (ctx.past_length - 1 - np.flatnonzero(ctx.past_mask[0])[-1])
    tol = 3 * ph.noise_sd / np.sqrt(S) * np.sqrt(steps)
    assert np.all(np.abs(mc - det) < tol)


def test_rollout_needs_measurement():
    ctx = _context()
    empty = dataclasses.replace(ctx, past_mask=np.zeros_like(ctx.past_mask))
    with pytest.raises(OracleInitError):
        environment_rollout(QUIET, empty, np.zeros((2, 24)), np.zeros((1, 24)), None, 1)


def test_rollout_rejects_fractional_dose():
    x = np.zeros((2, 24))
    x[1, 0] = 1.5
    with pytest.raises(ValueError):
        environment_rollout(QUIET, _context(), x, np.zeros((1, 24)), None, 1)


@settings(max_examples=30, deadline=None)
@given(hour=st.integers(0, 23), dose=st.integers(0, 25), extra=st.integers(1, 10))
def test_bolus_monotonicity(hour, dose, extra):
    ctx = _context()
    carbs = np.zeros((1, 24))
    carbs[0, [7, 12, 18]] = 50
    lo = np.zeros((2, 24))
    lo[1, hour] = dose
    hi = lo.copy()
    hi[1, hour] += extra
    y_lo = environment_rollout(QUIET, ctx, lo, carbs, None, 1)
    y_hi = environment_rollout(QUIET, ctx, hi, carbs, None, 1)
    assert np.all(y_hi <= y_lo + 1e-12)


def test_cohort_calibration_small():
    cohort = simulate_cohort(150, SimConfig(), seed=11)
    g = np.array([e.value for p in cohort for e in p.record.events_of("glucose")])
    assert np.mean((g >= 5) & (g <= 15)) >= 0.9
