import math

import numpy as np
import pytest
from pydantic import ValidationError

from src.exceptions import ConfigurationError
from src.likelihood import survival_loglik
from src.simulator import (
    TARGET_PROPORTIONS,
    SimTruth,
    SubjectHazards,
    SubjectLatents,
    SubjectTruth,
    apply_observation_scheme,
    calibrate_dropout,
    draw_residual_treatment_time,
    invert_event_time,
    resolve_dropout,
    simulate_dataset,
)
from src.tests.fixtures.cohorts import constant_params, make_subject, small_spec

LATENTS = SubjectLatents(u=np.zeros(4), age=62.0, log_psad=math.log(0.1))


def latent_subject(progression=math.inf, treatment=math.inf) -> SubjectTruth:
    return SubjectTruth(
        id="S0001",
        latents=LATENTS,
        progression_time=progression,
        treatment_time=treatment,
        first_cause=None,
        dropout_time=math.inf,
    )


def test_biopsy_and_psa_schedules():
    truth = SimTruth(dropout_rate=0.0)
    assert truth.biopsy_schedule().tolist() == [1.0, 2.0, 4.0, 6.0, 8.0, 10.0, 12.0]
    assert truth.psa_schedule().size == 51


def test_truth_validation():
    with pytest.raises(ValidationError):
        SimTruth(rho_true=0.0)
    with pytest.raises(ValidationError) as exc_info:
        SimTruth(gamma_h0={"prg": (-2.0,) * 5, "trt": (-4.0,) * 5})
    assert "needs 12 coefficients" in str(exc_info.value)


def test_constant_hazard_event_time_inverts_exponential():
    """Test that the first event solves H(t) = -log U with the cause split by hazard share."""
    hazards = SubjectHazards.constant({"prg": 0.2, "trt": 0.1})
    rng = np.random.default_rng(0)
    u, cause_draw = np.random.default_rng(0).random(2)
    event = invert_event_time(hazards, 200.0, rng)
    assert event.time == pytest.approx(-math.log(u) / 0.3, rel=1e-8)
    assert event.cause == ("prg" if cause_draw < 2 / 3 else "trt")


def test_event_beyond_horizon_is_infinite():
    hazards = SubjectHazards.constant({"prg": 1e-6, "trt": 1e-6})
    event = invert_event_time(hazards, 1.0, np.random.default_rng(1))
    assert event.time == math.inf
    assert event.cause is None


def test_residual_treatment_time_is_memoryless_for_constant_hazard():
    hazards = SubjectHazards.constant({"prg": 0.3, "trt": 0.1})
    u = np.random.default_rng(2).random()
    time = draw_residual_treatment_time(hazards, 2.0, 500.0, np.random.default_rng(2))
    assert time == pytest.approx(2.0 - math.log(u) / 0.1, rel=1e-8)


def test_residual_treatment_after_horizon_is_infinite():
    hazards = SubjectHazards.constant({"prg": 0.3, "trt": 0.1})
    assert draw_residual_treatment_time(hazards, 12.5, 12.5, np.random.default_rng(3)) == math.inf


def test_observation_detects_progression_at_next_biopsy():
    truth = SimTruth(dropout_rate=0.0, biopsy_jitter=0.0)
    record, _ = apply_observation_scheme(
        truth.model_spec(), truth, latent_subject(progression=1.5), 1.0, np.random.default_rng(4), rho=1.0
    )
    assert record.delta == 1
    assert record.biopsy_times == (0.0, 1.0, 2.0)
    assert record.terminal_time == 2.0
    assert record.measurement_times.max() <= 2.0


def test_observation_without_detection_censors_at_horizon():
    truth = SimTruth(dropout_rate=0.0)
    record, observed = apply_observation_scheme(
        truth.model_spec(), truth, latent_subject(progression=0.5), 1.0, np.random.default_rng(5), rho=0.0
    )
    assert record.delta == 0
    assert record.terminal_time == truth.horizon
    assert len(record.biopsy_times) == 8
    assert observed.dropout_time == math.inf


def test_observation_stops_biopsies_at_treatment():
    truth = SimTruth(dropout_rate=0.0, biopsy_jitter=0.0)
    record, _ = apply_observation_scheme(
        truth.model_spec(), truth, latent_subject(treatment=3.0), 1.0, np.random.default_rng(6)
    )
    assert record.delta == 2
    assert record.terminal_time == 3.0
    assert record.biopsy_times == (0.0, 1.0, 2.0)


def test_observation_needs_dropout_rate():
    truth = SimTruth()
    with pytest.raises(ConfigurationError):
        apply_observation_scheme(truth.model_spec(), truth, latent_subject(), 1.0, np.random.default_rng(7))


def test_simulation_is_deterministic(sim_truth, simulated):
    again = simulate_dataset(sim_truth, seed=11)
    assert again.patients == simulated.patients
    assert simulate_dataset(sim_truth, seed=12).patients != simulated.patients


def test_records_are_valid(simulated):
    assert len(simulated.patients) == 40
    for record in simulated.patients:
        assert record.biopsy_times[0] == 0.0
        assert record.terminal_time <= simulated.truth.horizon
        assert record.measurement_times.size > 0
    assert sum(simulated.event_proportions().values()) == pytest.approx(100.0)


def test_sensitivity_change_keeps_latent_histories(sim_truth, simulated):
    """Test that the latent stream does not depend on the detection probability."""
    perfect = simulate_dataset(sim_truth.model_copy(update={"rho_true": 1.0}), seed=11)
    assert [s.progression_time for s in perfect.latent] == [s.progression_time for s in simulated.latent]
    assert [p.age for p in perfect.patients] == [p.age for p in simulated.patients]
    detected = sum(p.delta == 1 for p in perfect.patients)
    assert detected >= sum(p.delta == 1 for p in simulated.patients)


def test_observed_patterns_match_likelihood():
    """Test that simulated observation frequencies agree with the likelihood factors for constant hazards."""
    rate_prg, rate_trt, rho = 0.3, 0.1, 0.75
    truth = SimTruth(
        dropout_rate=0.0,
        biopsy_jitter=0.0,
        horizon=3.0,
        first_biopsies=(1.0, 2.0),
        rho_true=rho,
    )
    sim_spec = truth.model_spec()
    n = 10_000
    rng = np.random.default_rng(8)
    progression = rng.exponential(1 / rate_prg, n)
    treatment = rng.exponential(1 / rate_trt, n)

    counts = {"censored": 0, "detected_1": 0, "detected_2": 0}
    for tp, tt in zip(progression, treatment):
        record, _ = apply_observation_scheme(
            sim_spec, truth, latent_subject(float(tp), float(tt)), 1.0, rng
        )
        if record.delta == 0:
            counts["censored"] += 1
        elif record.delta == 1:
            counts[f"detected_{len(record.biopsy_times) - 1}"] += 1

    spec = small_spec()
    patterns = {
        "censored": make_subject(biopsies=(0.0, 1.0, 2.0), delta=0, terminal=3.0),
        "detected_1": make_subject(biopsies=(0.0, 1.0), delta=1, terminal=1.0),
        "detected_2": make_subject(biopsies=(0.0, 1.0, 2.0), delta=1, terminal=2.0),
    }
    for name, subject in patterns.items():
        params = constant_params(spec, [subject.id], rate_prg, rate_trt, rho)
        expected = math.exp(survival_loglik(spec, params, subject))
        se = math.sqrt(expected * (1 - expected) / n)
        assert abs(counts[name] / n - expected) < 4 * se, name


def test_resolve_dropout_keeps_explicit_rate(sim_truth):
    assert resolve_dropout(sim_truth) is sim_truth


def test_calibrated_dropout_meets_censoring_target():
    truth = SimTruth(n_subjects=200)
    rate = calibrate_dropout(truth, seed=5, n_subjects=200)
    censored = simulate_dataset(truth.model_copy(update={"dropout_rate": rate}), seed=5).event_proportions()
    if rate > 0:
        assert censored["censoring"] / 100 == pytest.approx(truth.target_censoring, abs=0.01)
    else:
        assert censored["censoring"] / 100 >= truth.target_censoring


@pytest.mark.slow
def test_event_proportions_match_reference_study():
    """Test the calibrated outcome mix over twenty 500-subject datasets."""
    truth = resolve_dropout(SimTruth())
    shares = [simulate_dataset(truth, seed=1000 + i).event_proportions() for i in range(20)]
    for outcome, target in TARGET_PROPORTIONS.items():
        mean = float(np.mean([s[outcome] for s in shares]))
        assert mean == pytest.approx(target, abs=3.0), outcome
