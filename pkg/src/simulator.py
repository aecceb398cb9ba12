"""Forward simulation of active-surveillance cohorts from the joint model.

Each subject draws from its own SeedSequence substream, split into a latent
stream (random effects, covariates, event times) and an observation stream
(dropout, biopsy and PSA jitter, biopsy outcomes, measurement noise). The
observation stream consumes a fixed number of draws whatever the outcome, so
changing the sensitivity or the dropout rate keeps every other draw fixed.
"""

import logging
import math
from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np
from opentelemetry import trace
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from scipy import optimize, stats

from src.exceptions import ConfigurationError, NumericalError
from src.model_core import (
    CAUSES,
    N_RANDOM_EFFECTS,
    FixedSensitivity,
    ModelSpec,
    ParameterState,
    PatientRecord,
    association,
    mean_from_design,
    random_effects_design,
)
from src.quadrature import CumulativeIntegral, get_rule
from src.spline import NcsBasis, bspline_basis_from_knot_count, bspline_design

logger = logging.getLogger(__name__)
tracer = trace.get_tracer(__name__)

ROOT_TOLERANCE = 1e-10
CALIBRATION_SEED = 20240601
CALIBRATION_SUBJECTS = 2000
MAX_DROPOUT_RATE = 5.0

# Posterior means of the model fitted to the surveillance cohort. The source
# covariance table is not exactly symmetric in the (1, 4) cell; the two
# entries are averaged.
TRUE_BETA = (2.35, 0.27, 0.62, 1.00, 0.02)
TRUE_OMEGA = (
    (0.49, -0.04, -0.09, 0.01),
    (-0.04, 0.77, 0.43, -0.08),
    (-0.09, 0.43, 1.41, 1.43),
    (0.01, -0.08, 1.43, 2.60),
)
TRUE_TAU_EPS = 47.39
TRUE_GAMMA_H0 = {
    "prg": (-3.02, -2.57, -2.17, -1.87, -1.78, -1.87, -2.04, -2.26, -2.51, -2.74, -2.95, -3.15),
    "trt": (-5.13, -4.55, -4.26, -4.31, -4.47, -4.65, -4.80, -4.91, -5.11, -5.37, -5.66, -5.97),
}
TRUE_GAMMA = {"prg": 0.41, "trt": 0.25}
TRUE_ALPHA = {"prg": (0.16, 1.79), "trt": (0.40, 2.22)}
# Observed outcome mix of the reference simulation study, in percent
TARGET_PROPORTIONS = {"progression": 22.34, "treatment": 8.80, "censoring": 68.86}


class SimTruth(BaseModel):
    model_config = ConfigDict(frozen=True)

    beta: tuple[float, ...] = TRUE_BETA
    omega: tuple[tuple[float, ...], ...] = TRUE_OMEGA
    tau_eps: float = Field(default=TRUE_TAU_EPS, gt=0)
    gamma_h0: dict[str, tuple[float, ...]] = TRUE_GAMMA_H0
    gamma: dict[str, float] = TRUE_GAMMA
    alpha: dict[str, tuple[float, float]] = TRUE_ALPHA
    rho_true: float = 0.75
    kappa: float = Field(default=3.0, gt=0)

    psa_interval: float = Field(default=0.25, gt=0)
    first_biopsies: tuple[float, ...] = (1.0, 2.0)
    biopsy_interval: float = Field(default=2.0, gt=0)
    biopsy_jitter: float = Field(default=0.1, ge=0)
    psa_jitter: float = Field(default=0.04, ge=0)
    horizon: float = Field(default=12.5, gt=0)
    dropout_rate: Optional[float] = Field(default=None, ge=0)
    target_censoring: float = Field(default=TARGET_PROPORTIONS["censoring"] / 100, gt=0, lt=1)

    n_subjects: int = Field(default=500, ge=1)
    age_mean: float = 62.0
    age_sd: float = Field(default=6.0, gt=0)
    age_bounds: tuple[float, float] = (40.0, 85.0)
    log_psad_mean: float = math.log(0.1)
    log_psad_sd: float = Field(default=0.5, gt=0)
    age_center: float = 62.0

    ncs_boundary_knots: tuple[float, float] = (0.0, 12.5)
    ncs_internal_knots: tuple[float, ...] = (1.75, 4.25)
    bh_knots: int = Field(default=11, ge=2)

    @field_validator("rho_true")
    @classmethod
    def check_rho(cls, v: float) -> float:
        if not 0.0 < v <= 1.0:
            raise ValueError(f"rho_true must lie in (0, 1], got {v}")
        return v

    @model_validator(mode="after")
    def validate_truth(self):
        if len(self.beta) != 5:
            raise ValueError(f"beta needs 5 entries, got {len(self.beta)}")
        omega = self.omega_matrix
        if omega.shape != (N_RANDOM_EFFECTS, N_RANDOM_EFFECTS) or not np.allclose(omega, omega.T):
            raise ValueError("omega must be a symmetric 4x4 matrix")
        try:
            np.linalg.cholesky(omega)
        except np.linalg.LinAlgError as e:
            raise ValueError("omega must be positive definite") from e
        n_basis = self.bh_knots + 1
        for cause in CAUSES:
            if len(self.gamma_h0.get(cause, ())) != n_basis:
                raise ValueError(
                    f"gamma_h0[{cause}] needs {n_basis} coefficients for {self.bh_knots} knots"
                )
            if len(self.alpha.get(cause, ())) != 2 or cause not in self.gamma:
                raise ValueError(f"alpha and gamma must be given for cause {cause}")
        lo, hi = self.age_bounds
        if not lo < hi:
            raise ValueError(f"age_bounds must be increasing, got {self.age_bounds}")
        return self

    @property
    def omega_matrix(self) -> np.ndarray:
        return np.asarray(self.omega, dtype=float)

    def biopsy_schedule(self) -> np.ndarray:
        """Nominal biopsy times after baseline up to the horizon."""
        last = self.first_biopsies[-1] if self.first_biopsies else 0.0
        later = np.arange(last + self.biopsy_interval, self.horizon + 1e-9, self.biopsy_interval)
        schedule = np.r_[self.first_biopsies, later]
        return schedule[schedule <= self.horizon]

    def psa_schedule(self) -> np.ndarray:
        return np.arange(0.0, self.horizon + 1e-9, self.psa_interval)

    def model_spec(self, sensitivity=None) -> ModelSpec:
        """The bases the truth is expressed in."""
        basis = bspline_basis_from_knot_count(self.bh_knots, self.horizon)
        return ModelSpec(
            ncs=NcsBasis(
                boundary_knots=self.ncs_boundary_knots, internal_knots=self.ncs_internal_knots
            ),
            bh_basis={cause: basis for cause in CAUSES},
            sensitivity=sensitivity or FixedSensitivity(rho=self.rho_true),
            age_center=self.age_center,
        )

    def parameter_state(self, u: Optional[np.ndarray] = None, subject_ids=()) -> ParameterState:
        return ParameterState(
            beta=np.asarray(self.beta),
            u=np.zeros((0, N_RANDOM_EFFECTS)) if u is None else u,
            omega=self.omega_matrix,
            tau_eps=self.tau_eps,
            tau_u=1.0,
            gamma_h0={k: np.asarray(v) for k, v in self.gamma_h0.items()},
            tau_h0={k: 1.0 for k in CAUSES},
            gamma=dict(self.gamma),
            alpha={k: np.asarray(v) for k, v in self.alpha.items()},
            rho=self.rho_true,
            subject_ids=subject_ids,
        )


@dataclass(frozen=True)
class SubjectLatents:
    u: np.ndarray
    age: float
    log_psad: float


@dataclass(frozen=True)
class LatentEvent:
    time: float
    cause: Optional[str]


@dataclass(frozen=True)
class SubjectTruth:
    id: str
    latents: SubjectLatents
    progression_time: float
    treatment_time: float
    first_cause: Optional[str]
    dropout_time: float

    def to_row(self) -> dict:
        return {
            "subject_id": self.id,
            "u0": float(self.latents.u[0]),
            "u1": float(self.latents.u[1]),
            "u2": float(self.latents.u[2]),
            "u3": float(self.latents.u[3]),
            "age": self.latents.age,
            "log_psad": self.latents.log_psad,
            "progression_time": self.progression_time,
            "treatment_time": self.treatment_time,
            "first_cause": self.first_cause or "",
            "dropout_time": self.dropout_time,
        }


@dataclass
class SimulatedDataset:
    patients: list[PatientRecord]
    latent: list[SubjectTruth]
    seed: int
    truth: SimTruth

    def event_proportions(self) -> dict[str, float]:
        """Observed outcome mix in percent."""
        delta = np.array([p.delta for p in self.patients])
        return {
            "progression": 100.0 * float(np.mean(delta == 1)),
            "treatment": 100.0 * float(np.mean(delta == 2)),
            "censoring": 100.0 * float(np.mean(delta == 0)),
        }


class SubjectHazards:
    """Cause-specific hazards of one subject with cached cumulative integrals."""

    def __init__(
        self,
        hazards: dict[str, Callable[[np.ndarray], np.ndarray]],
        rule_kind: str = "gk15",
        breakpoints=(),
    ):
        self.hazards = hazards
        rule = get_rule(rule_kind)
        self._cumulative = {
            cause: CumulativeIntegral(rule, f, lower=0.0, breakpoints=breakpoints)
            for cause, f in hazards.items()
        }

    @classmethod
    def constant(cls, rates: dict[str, float]) -> "SubjectHazards":
        return cls({cause: (lambda t, r=rate: np.full(np.shape(t), r)) for cause, rate in rates.items()})

    def hazard(self, t, cause: str):
        return self.hazards[cause](np.asarray(t, dtype=float))

    def cumulative(self, t: float, cause: Optional[str] = None) -> float:
        causes = self.hazards if cause is None else (cause,)
        return float(sum(self._cumulative[c](t) for c in causes))


def subject_hazards(spec: ModelSpec, truth: SimTruth, latents: SubjectLatents) -> SubjectHazards:
    beta = np.asarray(truth.beta, dtype=float)
    age_offset = latents.age - spec.age_center

    def make(cause: str):
        g = np.asarray(truth.gamma_h0[cause], dtype=float)
        alpha = np.asarray(truth.alpha[cause], dtype=float)
        shift = truth.gamma[cause] * latents.log_psad

        def h(t):
            m_now = mean_from_design(random_effects_design(spec, t), beta, latents.u, age_offset)
            m_prev = mean_from_design(random_effects_design(spec, t - 1.0), beta, latents.u, age_offset)
            return np.exp(bspline_design(spec.basis(cause), t) @ g + shift + association(alpha, m_now, m_prev))

        return h

    return SubjectHazards({c: make(c) for c in CAUSES}, spec.quadrature, spec.breakpoints())


def draw_subject_latents(truth: SimTruth, rng: np.random.Generator) -> SubjectLatents:
    chol = np.linalg.cholesky(truth.omega_matrix)
    u = chol @ rng.standard_normal(N_RANDOM_EFFECTS)
    lo, hi = truth.age_bounds
    age = stats.truncnorm.rvs(
        (lo - truth.age_mean) / truth.age_sd,
        (hi - truth.age_mean) / truth.age_sd,
        loc=truth.age_mean,
        scale=truth.age_sd,
        random_state=rng,
    )
    log_psad = rng.normal(truth.log_psad_mean, truth.log_psad_sd)
    return SubjectLatents(u=u, age=float(age), log_psad=float(log_psad))


def _solve_cumulative(
    cumulative: Callable[[float], float], target: float, start: float, horizon: float
) -> float:
    """Smallest t in [start, horizon] with cumulative(t) = target (cumulative(start) <= target)."""
    try:
        root = optimize.brentq(
            lambda t: cumulative(t) - target, start, horizon, xtol=ROOT_TOLERANCE, rtol=4 * np.finfo(float).eps
        )
    except ValueError as e:
        raise NumericalError(
            f"Event time not bracketed on [{start}, {horizon}] for target {target}: {e}"
        ) from e
    return float(root)


def _exponential_target(u: float) -> float:
    """-log U; U = 0 never reaches its target."""
    return -math.log(u) if u > 0 else math.inf


def invert_event_time(
    hazards: SubjectHazards, horizon: float, rng: np.random.Generator
) -> LatentEvent:
    """First event time by inversion of the all-cause cumulative hazard."""
    target = _exponential_target(rng.random())
    cause_draw = rng.random()
    if hazards.cumulative(horizon) < target:
        return LatentEvent(time=math.inf, cause=None)
    time = _solve_cumulative(hazards.cumulative, target, 0.0, horizon)

    rates = {cause: float(hazards.hazard(time, cause)) for cause in hazards.hazards}
    total = sum(rates.values())
    threshold = 0.0
    for cause, rate in rates.items():
        threshold += rate / total
        if cause_draw < threshold:
            return LatentEvent(time=time, cause=cause)
    return LatentEvent(time=time, cause=list(rates)[-1])


def draw_residual_treatment_time(
    hazards: SubjectHazards, after: float, horizon: float, rng: np.random.Generator
) -> float:
    """Treatment time given no treatment up to `after`; inf beyond the horizon."""
    target = _exponential_target(rng.random())
    if not after < horizon:
        return math.inf
    start = hazards.cumulative(after, "trt")
    if hazards.cumulative(horizon, "trt") - start < target:
        return math.inf
    return _solve_cumulative(lambda t: hazards.cumulative(t, "trt") - start, target, after, horizon)


def simulate_subject_truth(
    spec: ModelSpec, truth: SimTruth, subject_id: str, rng: np.random.Generator
) -> tuple[SubjectTruth, float]:
    """Latent covariates and event times; returns the truth and a standard exponential for dropout."""
    latents = draw_subject_latents(truth, rng)
    hazards = subject_hazards(spec, truth, latents)
    first = invert_event_time(hazards, truth.horizon, rng)
    # Drawn unconditionally to keep the stream aligned across outcomes.
    residual = draw_residual_treatment_time(
        hazards, first.time if first.cause == "prg" else truth.horizon, truth.horizon, rng
    )
    dropout_exponential = float(rng.standard_exponential())

    if first.cause == "prg":
        progression_time, treatment_time = first.time, residual
    elif first.cause == "trt":
        progression_time, treatment_time = math.inf, first.time
    else:
        progression_time = treatment_time = math.inf
    subject = SubjectTruth(
        id=subject_id,
        latents=latents,
        progression_time=progression_time,
        treatment_time=treatment_time,
        first_cause=first.cause,
        dropout_time=math.inf,
    )
    return subject, dropout_exponential


def apply_observation_scheme(
    spec: ModelSpec,
    truth: SimTruth,
    subject: SubjectTruth,
    dropout_exponential: float,
    rng: np.random.Generator,
    rho: Optional[float] = None,
    dropout_rate: Optional[float] = None,
) -> tuple[PatientRecord, SubjectTruth]:
    """Observed record from the latent truth; biopsies stop at treatment or censoring."""
    rho = truth.rho_true if rho is None else rho
    rate = truth.dropout_rate if dropout_rate is None else dropout_rate
    if rate is None:
        raise ConfigurationError("Dropout rate is not set; calibrate it first")

    schedule = truth.biopsy_schedule()
    psa_grid = truth.psa_schedule()
    biopsy_shift = rng.uniform(-truth.biopsy_jitter, truth.biopsy_jitter, schedule.size)
    detection = rng.random(schedule.size)
    psa_shift = rng.uniform(-truth.psa_jitter, truth.psa_jitter, psa_grid.size)
    noise = rng.standard_t(truth.kappa, psa_grid.size) / math.sqrt(truth.tau_eps)

    dropout_time = dropout_exponential / rate if rate > 0 else math.inf
    censor_time = min(truth.horizon, dropout_time)
    end = min(subject.treatment_time, censor_time)

    biopsies = [0.0]
    delta, terminal = None, None
    for nominal, shift, u in zip(schedule, biopsy_shift, detection):
        t = float(nominal + shift)
        if t >= end:
            break
        biopsies.append(t)
        if subject.progression_time < t and u < rho:
            delta, terminal = 1, t
            break
    if delta is None:
        if subject.treatment_time < censor_time:
            delta, terminal = 2, subject.treatment_time
        else:
            delta, terminal = 0, censor_time

    times = psa_grid + np.r_[0.0, psa_shift[1:]]
    keep = times <= terminal
    mean = mean_from_design(
        random_effects_design(spec, times[keep]),
        np.asarray(truth.beta, dtype=float),
        subject.latents.u,
        subject.latents.age - spec.age_center,
    )
    values = mean + noise[keep]

    record = PatientRecord(
        id=subject.id,
        age=subject.latents.age,
        psad=math.exp(subject.latents.log_psad),
        log_psad=subject.latents.log_psad,
        measurements=tuple(zip(times[keep].tolist(), values.tolist())),
        biopsy_times=tuple(biopsies),
        delta=delta,
        terminal_time=terminal,
    )
    return record, replace(subject, dropout_time=dropout_time)


def _subject_streams(seed: int, n_subjects: int):
    for child in np.random.SeedSequence(seed).spawn(n_subjects):
        latent, observation = child.spawn(2)
        yield np.random.default_rng(latent), np.random.default_rng(observation)


def _subject_id(index: int) -> str:
    return f"S{index + 1:04d}"


def _latent_pool(spec: ModelSpec, truth: SimTruth, seed: int, n_subjects: int):
    pool = []
    for i, (latent_rng, observation_rng) in enumerate(_subject_streams(seed, n_subjects)):
        subject, exponential = simulate_subject_truth(spec, truth, _subject_id(i), latent_rng)
        pool.append((subject, exponential, observation_rng.bit_generator.state))
    return pool


def _observe_pool(spec, truth, pool, rho=None, dropout_rate=None):
    patients, latent = [], []
    for subject, exponential, state in pool:
        rng = np.random.default_rng()
        rng.bit_generator.state = state
        record, observed = apply_observation_scheme(
            spec, truth, subject, exponential, rng, rho=rho, dropout_rate=dropout_rate
        )
        patients.append(record)
        latent.append(observed)
    return patients, latent


def calibrate_dropout(
    truth: SimTruth,
    target_censoring: Optional[float] = None,
    seed: int = CALIBRATION_SEED,
    n_subjects: int = CALIBRATION_SUBJECTS,
) -> float:
    """Exponential dropout rate whose simulated censoring share meets the target."""
    target = truth.target_censoring if target_censoring is None else target_censoring
    spec = truth.model_spec()
    pool = _latent_pool(spec, truth, seed, n_subjects)

    def censoring_gap(rate: float) -> float:
        patients, _ = _observe_pool(spec, truth, pool, dropout_rate=rate)
        return float(np.mean([p.delta == 0 for p in patients])) - target

    if censoring_gap(0.0) >= 0:
        logger.info(f"Censoring already reaches {target:.4f} without dropout")
        return 0.0
    if censoring_gap(MAX_DROPOUT_RATE) < 0:
        raise NumericalError(
            f"Censoring target {target:.4f} unreachable with dropout rates up to {MAX_DROPOUT_RATE}"
        )
    rate = optimize.brentq(censoring_gap, 0.0, MAX_DROPOUT_RATE, xtol=1e-6)
    logger.info(f"Calibrated dropout rate {rate:.6f} for censoring target {target:.4f}")
    return float(rate)


def resolve_dropout(truth: SimTruth) -> SimTruth:
    if truth.dropout_rate is not None:
        return truth
    return truth.model_copy(update={"dropout_rate": calibrate_dropout(truth)})


def simulate_dataset(truth: SimTruth, seed: int) -> SimulatedDataset:
    """n_subjects independent subjects; deterministic given the seed."""
    truth = resolve_dropout(truth)
    spec = truth.model_spec()
    with tracer.start_as_current_span("simulate_dataset", attributes={"seed": seed}):
        pool = _latent_pool(spec, truth, seed, truth.n_subjects)
        patients, latent = _observe_pool(spec, truth, pool)
    dataset = SimulatedDataset(patients=patients, latent=latent, seed=seed, truth=truth)
    shares = ", ".join(f"{k}={v:.2f}%" for k, v in dataset.event_proportions().items())
    logger.info(f"[seed={seed}] simulated {len(patients)} subjects: {shares}")
    return dataset
