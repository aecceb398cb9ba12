import math

import numpy as np
import pytest
from pydantic import ValidationError

from src.exceptions import ConfigurationError, InputError, ParameterError
from src.model_core import (
    BetaSensitivity,
    FixedSensitivity,
    ParameterState,
    UniformSensitivity,
    build_model_spec,
    cumulative_hazard,
    format_sensitivity,
    hazard,
    log_baseline_hazard,
    longitudinal_mean,
    parse_sensitivity,
    population_trajectory,
)
from src.tests.fixtures.cohorts import (
    constant_params,
    make_subject,
    random_params,
    random_subject,
    small_spec,
)


def test_patient_record_fills_log_psad():
    subject = make_subject(psad=0.25)
    assert subject.log_psad == pytest.approx(math.log(0.25))


def test_patient_record_sorts_measurements():
    subject = make_subject(measurements=((1.0, 2.0), (0.0, 1.5)))
    assert subject.measurement_times.tolist() == [0.0, 1.0]


def test_first_biopsy_must_be_baseline():
    with pytest.raises(ValidationError) as exc_info:
        make_subject(biopsies=(0.5, 1.0))
    assert "first biopsy must be at time 0" in str(exc_info.value)


def test_detected_progression_ends_at_last_biopsy():
    with pytest.raises(ValidationError) as exc_info:
        make_subject(biopsies=(0.0, 1.0, 2.0), delta=1, terminal=2.5)
    assert "delta=1 requires terminal_time" in str(exc_info.value)


def test_detected_progression_needs_follow_up_biopsy():
    with pytest.raises(ValidationError):
        make_subject(biopsies=(0.0,), delta=1, terminal=0.0)


def test_terminal_time_before_last_biopsy_rejected():
    with pytest.raises(ValidationError):
        make_subject(biopsies=(0.0, 1.0, 2.0), delta=0, terminal=1.5)


def test_measurement_after_terminal_rejected():
    with pytest.raises(ValidationError):
        make_subject(terminal=2.0, measurements=((2.5, 1.0),))


def test_censored_subject_at_baseline_is_valid():
    subject = make_subject(biopsies=(0.0,), delta=0, terminal=0.0)
    assert subject.n_intervals == 0


@pytest.mark.parametrize(
    "text, expected",
    [
        ("fixed:0.75", FixedSensitivity(rho=0.75)),
        ("uniform:0.6,0.9", UniformSensitivity(lo=0.6, hi=0.9)),
        ("beta:8,3", BetaSensitivity(a=8.0, b=3.0)),
    ],
)
def test_parse_sensitivity(text, expected):
    assert parse_sensitivity(text) == expected
    assert parse_sensitivity(format_sensitivity(expected)) == expected


@pytest.mark.parametrize("text", ["fixed:1.2", "uniform:0.9,0.6", "normal:0,1", "fixed:", "fixed:abc"])
def test_parse_sensitivity_rejects(text):
    with pytest.raises((ConfigurationError, ValidationError)):
        parse_sensitivity(text)


def test_build_model_spec_default_knots():
    subjects = [make_subject(measurements=((0.0, 2.0), (0.5, 2.1), (1.0, 2.2), (1.5, 2.4)), terminal=3.0)]
    fixed = build_model_spec(subjects, FixedSensitivity(rho=0.75))
    prior = build_model_spec(subjects, UniformSensitivity(lo=0.6, hi=0.9))
    assert fixed.basis("prg").n_basis == 12
    assert prior.basis("prg").n_basis == 5
    assert fixed.basis("trt").upper == 3.0


def test_build_model_spec_empty_dataset():
    with pytest.raises(InputError):
        build_model_spec([], FixedSensitivity(rho=0.75))


def test_spec_round_trips_through_json():
    spec = small_spec(UniformSensitivity(lo=0.5, hi=0.8))
    restored = type(spec).model_validate_json(spec.model_dump_json())
    assert restored == spec
    assert restored.estimates_rho


def test_breakpoints_include_shifted_ncs_knots():
    spec = small_spec()
    points = spec.breakpoints()
    assert 2.0 in points and 3.0 in points and 6.0 in points
    assert all(p > 0 for p in points)


def test_parameter_state_validation():
    spec = small_spec()
    params = random_params(spec, ["S1"], np.random.default_rng(0))
    params.validate()
    params.omega[0, 1] = 5.0
    with pytest.raises(ParameterError):
        params.validate()


def test_parameter_state_round_trip():
    spec = small_spec()
    params = random_params(spec, ["S1", "S2"], np.random.default_rng(1))
    restored = ParameterState.from_dict(params.to_dict())
    assert np.array_equal(restored.u, params.u)
    assert restored.gamma == params.gamma
    assert np.array_equal(restored.random_effects("S2"), params.u[1])


def test_missing_random_effects_raise():
    spec = small_spec()
    params = random_params(spec, ["S1"], np.random.default_rng(2))
    with pytest.raises(ParameterError):
        params.random_effects("S7")


def test_longitudinal_mean_adds_random_effects():
    spec = small_spec()
    params = random_params(spec, ["S1"], np.random.default_rng(3))
    subject = make_subject(age=65.0)
    # Every NCS basis function is zero at t = 0
    expected = params.beta[0] + params.u[0, 0] + params.beta[4] * (65.0 - spec.age_center)
    assert longitudinal_mean(spec, params, subject, 0.0) == pytest.approx(expected)


def test_population_trajectory_matches_zero_random_effects():
    spec = small_spec()
    params = random_params(spec, ["S1"], np.random.default_rng(4))
    params.u[:] = 0.0
    subject = make_subject(age=62.0)
    times = np.array([0.5, 2.0, 4.0])
    assert np.allclose(
        population_trajectory(spec, params.beta, 62.0, times),
        longitudinal_mean(spec, params, subject, times),
    )


def test_constant_log_baseline_from_partition_of_unity():
    spec = small_spec()
    gamma = np.full(spec.basis("prg").n_basis, -1.5)
    assert np.allclose(log_baseline_hazard(spec, gamma, "prg", np.linspace(0, 10, 11)), -1.5)


def test_cumulative_hazard_of_constant_rate():
    spec = small_spec()
    subject = make_subject()
    params = constant_params(spec, ["S1"], 0.2, 0.05, 0.75)
    assert hazard(spec, params, subject, 1.3, "prg") == pytest.approx(0.2)
    assert cumulative_hazard(spec, params, subject, 3.7, "prg") == pytest.approx(0.2 * 3.7, rel=1e-13)
    assert cumulative_hazard(spec, params, subject, 0.0, "trt") == 0.0


@pytest.mark.parametrize("seed", range(25))
def test_hazards_are_positive_and_finite(seed):
    """Test both cause-specific hazards across random parameters, subjects and times."""
    rng = np.random.default_rng(seed)
    spec = small_spec()
    subject = random_subject(f"H{seed}", rng)
    params = random_params(spec, [subject.id], rng)
    t = np.r_[0.0, np.sort(rng.uniform(0.0, 12.0, 200)), 12.0]
    for cause in ("prg", "trt"):
        values = hazard(spec, params, subject, t, cause)
        assert np.all(np.isfinite(values))
        assert np.all(values > 0)
        cumulative = cumulative_hazard(spec, params, subject, t, cause)
        assert np.all(np.diff(cumulative) > 0)
