"""Log-likelihood, log-prior and log-posterior of the joint model.

Survival contributions are evaluated on a ``SurvivalGrid``: quadrature nodes
and design rows for every subject are laid out once, so one evaluation is a
handful of vectorized passes over all subjects. The progression and the
treatment parts are separable; the sampler caches them independently.

Interval probabilities use the identity

    A_ij = exp(-H(t_{j-1})) - exp(-H(t_j)) = exp(-H(t_{j-1})) (1 - exp(-dH_j))

with dH_j the panel quadrature of the hazard over the interval, which is the
nested integral evaluated without cancellation. ``interval_progression_prob``
keeps the nested quadrature as a reference.
"""

import logging
import math
from dataclasses import dataclass, replace
from typing import NamedTuple, Optional, Sequence, Union

import numpy as np
from scipy import linalg, stats
from scipy.special import logsumexp

from src.exceptions import InputError, ParameterError
from src.model_core import (
    CAUSES,
    BetaSensitivity,
    FixedSensitivity,
    ModelSpec,
    ParameterState,
    PatientRecord,
    UniformSensitivity,
    association,
    hazard,
    mean_from_design,
    random_effects_design,
)
from src.quadrature import integrate_nested, panel_edges, panel_nodes
from src.spline import bspline_design

logger = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)


def longitudinal_logdensity(y, mean, sigma, kappa: float = 3.0):
    """Log density of y under a location-scale t with kappa degrees of freedom."""
    sigma = np.asarray(sigma, dtype=float)
    if np.any(~np.isfinite(sigma)) or np.any(sigma <= 0):
        raise ParameterError(f"Residual scale must be positive, got {sigma}")
    return stats.t.logpdf(y, df=kappa, loc=mean, scale=sigma)


def augmented_longitudinal_loglik(y, mean, tau_eps: float, lam) -> np.ndarray:
    """Normal log density of y given scale-mixture weights: precision tau_eps * lam."""
    precision = tau_eps * np.asarray(lam, dtype=float)
    residual = np.asarray(y, dtype=float) - mean
    return 0.5 * (np.log(precision) - LOG_2PI) - 0.5 * precision * residual**2


def random_effects_logdensity(u: np.ndarray, omega: np.ndarray) -> np.ndarray:
    """log N(u_i; 0, omega) for every row of u; -inf rows when omega is not SPD."""
    u = np.atleast_2d(u)
    try:
        chol = linalg.cholesky(omega, lower=True)
    except linalg.LinAlgError:
        return np.full(u.shape[0], -np.inf)
    z = linalg.solve_triangular(chol, u.T, lower=True)
    dim = omega.shape[0]
    return (
        -0.5 * np.sum(z**2, axis=0)
        - np.sum(np.log(np.diag(chol)))
        - 0.5 * dim * LOG_2PI
    )


class ProgressionTerms(NamedTuple):
    # (n_subjects, max_intervals); -inf beyond each subject's N_i
    log_interval_prob: np.ndarray
    # H_prg at the last biopsy
    cumulative_last: np.ndarray


@dataclass
class _CauseNodes:
    time: np.ndarray
    weight: np.ndarray
    subject: np.ndarray
    segment: np.ndarray
    bspline: np.ndarray
    design_now: np.ndarray
    design_prev: np.ndarray


class SurvivalGrid:
    """Precomputed quadrature layout for the survival part of a dataset."""

    def __init__(self, spec: ModelSpec, patients: Sequence[PatientRecord]):
        self.spec = spec
        self.n_subjects = len(patients)
        self.delta = np.array([p.delta for p in patients], dtype=int)
        self.n_intervals = np.array([p.n_intervals for p in patients], dtype=int)
        self.max_intervals = max(1, int(self.n_intervals.max(initial=0)))
        self.log_psad = np.array([p.log_psad for p in patients], dtype=float)
        self.age_offset = np.array([p.age - spec.age_center for p in patients], dtype=float)
        self.terminal_time = np.array([p.terminal_time for p in patients], dtype=float)

        breakpoints = spec.breakpoints()
        self.prg = self._build_nodes(patients, "prg", breakpoints)
        self.trt = self._build_nodes(patients, "trt", breakpoints)

        self.terminal_bspline = bspline_design(spec.basis("trt"), self.terminal_time)
        self.terminal_now = random_effects_design(spec, self.terminal_time)
        self.terminal_prev = random_effects_design(spec, self.terminal_time - 1.0)

        # Misclassification exponents per interval: (1 - rho)^(N - j + 1) for a
        # missed progression, rho (1 - rho)^(N - j) for a detected one.
        j = np.arange(1, self.max_intervals + 1)
        valid = j[None, :] <= self.n_intervals[:, None]
        detected = (self.delta == 1)[:, None]
        exponent = self.n_intervals[:, None] - j[None, :] + np.where(detected, 0, 1)
        self.interval_valid = valid
        self.miss_exponent = np.where(valid, exponent, 0)
        self.detected = self.delta == 1

        logger.debug(
            f"Survival grid: {self.n_subjects} subjects, {self.prg.time.size} progression "
            f"nodes, {self.trt.time.size} treatment nodes"
        )

    def _build_nodes(self, patients, cause: str, breakpoints) -> _CauseNodes:
        rule = self.spec.rule
        times, weights, subjects, segments = [], [], [], []
        for i, patient in enumerate(patients):
            if cause == "prg":
                biopsies = np.asarray(patient.biopsy_times)
                end = biopsies[-1]
                cuts = (*breakpoints, *biopsies)
            else:
                end = patient.terminal_time
                cuts = breakpoints
            if end <= 0:
                continue
            edges = panel_edges(0.0, end, cuts)
            nodes, node_weights = panel_nodes(rule, edges)
            if cause == "prg":
                mids = (edges[:-1] + edges[1:]) / 2.0
                interval = np.searchsorted(biopsies, mids, side="right") - 1
                segment = i * self.max_intervals + interval
            else:
                segment = np.full(edges.size - 1, i)
            times.append(nodes.ravel())
            weights.append(node_weights.ravel())
            subjects.append(np.full(nodes.size, i))
            segments.append(np.repeat(segment, rule.size))

        if times:
            time = np.concatenate(times)
            weight = np.concatenate(weights)
            subject = np.concatenate(subjects)
            segment = np.concatenate(segments)
        else:
            time = weight = np.empty(0)
            subject = segment = np.empty(0, dtype=int)

        return _CauseNodes(
            time=time,
            weight=weight,
            subject=subject,
            segment=segment,
            bspline=bspline_design(self.spec.basis(cause), time),
            design_now=random_effects_design(self.spec, time),
            design_prev=random_effects_design(self.spec, time - 1.0),
        )

    def _log_hazard_at_nodes(self, nodes: _CauseNodes, params: ParameterState, cause: str):
        u = params.u[nodes.subject]
        age = self.age_offset[nodes.subject]
        m_now = mean_from_design(nodes.design_now, params.beta, u, age)
        m_prev = mean_from_design(nodes.design_prev, params.beta, u, age)
        return (
            nodes.bspline @ params.gamma_h0[cause]
            + params.gamma[cause] * self.log_psad[nodes.subject]
            + association(params.alpha[cause], m_now, m_prev)
        )

    def progression_terms(self, params: ParameterState) -> ProgressionTerms:
        nodes = self.prg
        with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
            h = np.exp(self._log_hazard_at_nodes(nodes, params, "prg"))
            increments = np.bincount(
                nodes.segment,
                weights=nodes.weight * h,
                minlength=self.n_subjects * self.max_intervals,
            ).reshape(self.n_subjects, self.max_intervals)
            cumulative_end = np.cumsum(increments, axis=1)
            cumulative_start = np.concatenate(
                [np.zeros((self.n_subjects, 1)), cumulative_end[:, :-1]], axis=1
            )
            log_prob = -cumulative_start + np.log(-np.expm1(-increments))
        log_prob = np.where(self.interval_valid, log_prob, -np.inf)
        last = np.where(
            self.n_intervals > 0,
            cumulative_end[np.arange(self.n_subjects), np.maximum(self.n_intervals - 1, 0)],
            0.0,
        )
        return ProgressionTerms(log_interval_prob=log_prob, cumulative_last=last)

    def misclassification_log_weights(self, rho: float) -> np.ndarray:
        if not 0.0 <= rho <= 1.0:
            raise ParameterError(f"Sensitivity must lie in [0, 1], got {rho}")
        log_miss = math.log1p(-rho) if rho < 1.0 else -np.inf
        log_rho = math.log(rho) if rho > 0.0 else -np.inf
        # A zero exponent contributes exactly 0, never 0 * -inf.
        with np.errstate(invalid="ignore"):
            weights = np.where(self.miss_exponent == 0, 0.0, self.miss_exponent * log_miss)
        weights = weights + np.where(self.detected, log_rho, 0.0)[:, None]
        return np.where(self.interval_valid, weights, -np.inf)

    def progression_loglik(self, terms: ProgressionTerms, rho: float) -> np.ndarray:
        missed = terms.log_interval_prob + self.misclassification_log_weights(rho)
        no_progression = np.where(self.detected, -np.inf, -terms.cumulative_last)
        stacked = np.concatenate([no_progression[:, None], missed], axis=1)
        result = logsumexp(stacked, axis=1)
        if rho == 0.0 and np.any(self.detected):
            logger.warning(
                f"{int(self.detected.sum())} detected progression(s) are impossible under zero sensitivity"
            )
        return result

    def treatment_cumulative(self, params: ParameterState) -> np.ndarray:
        """H_trt at each subject's terminal time."""
        nodes = self.trt
        with np.errstate(over="ignore"):
            h = np.exp(self._log_hazard_at_nodes(nodes, params, "trt"))
        return np.bincount(nodes.subject, weights=nodes.weight * h, minlength=self.n_subjects)

    def treatment_loglik(self, params: ParameterState) -> np.ndarray:
        cumulative = self.treatment_cumulative(params)
        u = params.u
        m_now = mean_from_design(self.terminal_now, params.beta, u, self.age_offset)
        m_prev = mean_from_design(self.terminal_prev, params.beta, u, self.age_offset)
        log_h_terminal = (
            self.terminal_bspline @ params.gamma_h0["trt"]
            + params.gamma["trt"] * self.log_psad
            + association(params.alpha["trt"], m_now, m_prev)
        )
        return -cumulative + np.where(self.delta == 2, log_h_terminal, 0.0)

    def loglik(self, params: ParameterState) -> np.ndarray:
        """Per-subject survival log-likelihood."""
        terms = self.progression_terms(params)
        return self.progression_loglik(terms, params.rho) + self.treatment_loglik(params)


class ModelData:
    """A dataset prepared for repeated likelihood evaluation."""

    def __init__(self, spec: ModelSpec, patients: Sequence[PatientRecord]):
        if not patients:
            raise InputError("Likelihood needs at least one subject")
        self.spec = spec
        self.patients = tuple(patients)
        self.subject_ids = tuple(p.id for p in patients)
        if len(set(self.subject_ids)) != len(self.subject_ids):
            raise InputError("Subject ids must be unique")
        self.n_subjects = len(patients)

        counts = [len(p.measurements) for p in patients]
        self.obs_subject = np.repeat(np.arange(self.n_subjects), counts)
        self.obs_time = np.concatenate([p.measurement_times for p in patients])
        self.obs_y = np.concatenate([p.measurement_values for p in patients])
        self.obs_design = random_effects_design(spec, self.obs_time)
        self.age_offset = np.array([p.age - spec.age_center for p in patients], dtype=float)
        self.obs_age_offset = self.age_offset[self.obs_subject]
        self.n_measurements = self.obs_y.size
        self.measurements_per_subject = np.asarray(counts, dtype=int)

        self.grid = SurvivalGrid(spec, patients)

    def fixed_effects_design(self) -> np.ndarray:
        """[1, C(t), age - center] rows for the longitudinal measurements."""
        return np.column_stack([self.obs_design, self.obs_age_offset])

    def longitudinal_mean(self, beta: np.ndarray, u: np.ndarray) -> np.ndarray:
        return mean_from_design(self.obs_design, beta, u[self.obs_subject], self.obs_age_offset)

    def per_subject(self, values: np.ndarray) -> np.ndarray:
        return np.bincount(self.obs_subject, weights=values, minlength=self.n_subjects)


def prepare_data(spec: ModelSpec, patients: Sequence[PatientRecord]) -> ModelData:
    return ModelData(spec, patients)


def _aligned(params: ParameterState, data: ModelData) -> ParameterState:
    if not params.subject_ids or params.subject_ids == data.subject_ids:
        if params.u.shape[0] != data.n_subjects:
            raise ParameterError(
                f"{params.u.shape[0]} random-effect rows for {data.n_subjects} subjects"
            )
        return params
    u = np.vstack([params.random_effects(sid) for sid in data.subject_ids])
    return replace(params, u=u, subject_ids=data.subject_ids, lam=None)


def _single(spec: ModelSpec, params: ParameterState, subject: PatientRecord):
    grid = SurvivalGrid(spec, [subject])
    u = params.random_effects(subject.id)[None, :]
    return grid, replace(params, u=u, subject_ids=(subject.id,), lam=None)


def survival_loglik(spec: ModelSpec, params: ParameterState, subject: PatientRecord) -> float:
    """log p(T_i, delta_i | u_i, rho, theta) for one subject."""
    grid, one = _single(spec, params, subject)
    return float(grid.loglik(one)[0])


@dataclass
class SurvivalFactorBreakdown:
    subject_id: str
    factor: str
    log_factor: float
    interval_probs: list[float]
    log_no_progression: Optional[float]
    log_missed_terms: list[float]
    cumulative_prg_last_biopsy: float
    log_treatment_part: float

    def to_dict(self) -> dict:
        return {
            "subject_id": self.subject_id,
            "factor": self.factor,
            "log_factor": self.log_factor,
            "interval_probs": self.interval_probs,
            "log_no_progression": self.log_no_progression,
            "log_missed_terms": self.log_missed_terms,
            "cumulative_prg_last_biopsy": self.cumulative_prg_last_biopsy,
            "log_treatment_part": self.log_treatment_part,
        }


def subject_breakdown(
    spec: ModelSpec, params: ParameterState, subject: PatientRecord
) -> SurvivalFactorBreakdown:
    grid, one = _single(spec, params, subject)
    terms = grid.progression_terms(one)
    n = subject.n_intervals
    log_a = terms.log_interval_prob[0, :n]
    missed = log_a + grid.misclassification_log_weights(one.rho)[0, :n]
    treatment = float(grid.treatment_loglik(one)[0])
    progression = float(grid.progression_loglik(terms, one.rho)[0])
    no_progression = None if subject.delta == 1 else float(-terms.cumulative_last[0] + treatment)
    return SurvivalFactorBreakdown(
        subject_id=subject.id,
        factor={0: "F1", 1: "F2", 2: "F3"}[subject.delta],
        log_factor=progression + treatment,
        interval_probs=np.exp(log_a).tolist(),
        log_no_progression=no_progression,
        log_missed_terms=(missed + treatment).tolist(),
        cumulative_prg_last_biopsy=float(terms.cumulative_last[0]),
        log_treatment_part=treatment,
    )


def interval_progression_prob(
    spec: ModelSpec, params: ParameterState, subject: PatientRecord, j: int
) -> float:
    """A_ij by nested Gauss-Kronrod quadrature over the j-th biopsy interval."""
    if not 1 <= j <= subject.n_intervals:
        raise InputError(
            f"Interval index {j} outside 1..{subject.n_intervals} for subject {subject.id}"
        )
    lo, hi = subject.biopsy_times[j - 1], subject.biopsy_times[j]
    result = integrate_nested(
        spec.rule,
        lambda v, cumulative: hazard(spec, params, subject, v, "prg") * np.exp(-cumulative),
        lambda v: hazard(spec, params, subject, v, "prg"),
        lo,
        hi,
        lower=0.0,
        breakpoints=(*spec.breakpoints(), *subject.biopsy_times),
    )
    return result.value


def _gamma_logpdf(x: float, shape: float, rate: float) -> float:
    if not (math.isfinite(x) and x > 0):
        return -np.inf
    return float(stats.gamma.logpdf(x, a=shape, scale=1.0 / rate))


def log_sensitivity_prior(spec: ModelSpec, rho: float) -> float:
    mode = spec.sensitivity
    if not 0.0 <= rho <= 1.0:
        return -np.inf
    if isinstance(mode, FixedSensitivity):
        return 0.0 if abs(rho - mode.rho) <= 1e-12 else -np.inf
    if isinstance(mode, UniformSensitivity):
        return -math.log(mode.hi - mode.lo) if mode.lo <= rho <= mode.hi else -np.inf
    if isinstance(mode, BetaSensitivity):
        return float(stats.beta.logpdf(rho, mode.a, mode.b))
    raise ParameterError(f"Unknown sensitivity mode {mode!r}")


def log_penalized_spline_prior(spec: ModelSpec, cause: str, gamma_h0, tau_h0: float) -> float:
    """(rank/2) log tau - (tau/2) g' M g, dropping terms constant in (g, tau)."""
    if not (math.isfinite(tau_h0) and tau_h0 > 0):
        return -np.inf
    penalty = spec.penalty_matrix(cause)
    g = np.asarray(gamma_h0, dtype=float)
    return 0.5 * penalty.rank_term * math.log(tau_h0) - 0.5 * tau_h0 * float(g @ penalty.matrix @ g)


def log_prior(spec: ModelSpec, params: ParameterState) -> float:
    priors = spec.priors
    total = float(stats.norm.logpdf(params.beta, scale=math.sqrt(priors.beta_variance)).sum())
    for cause in CAUSES:
        total += float(stats.norm.logpdf(params.gamma[cause], scale=math.sqrt(priors.gamma_variance)))
        total += float(
            stats.norm.logpdf(params.alpha[cause], scale=math.sqrt(priors.alpha_variance)).sum()
        )
        total += log_penalized_spline_prior(spec, cause, params.gamma_h0[cause], params.tau_h0[cause])
        total += _gamma_logpdf(params.tau_h0[cause], priors.tau_h0_shape, priors.tau_h0_rate)

    total += _gamma_logpdf(params.tau_u, priors.tau_u_shape, priors.tau_u_rate)
    total += _gamma_logpdf(params.tau_eps, priors.tau_eps_shape, priors.tau_eps_rate)
    if not np.isfinite(total):
        return -np.inf

    dim = params.omega.shape[0]
    try:
        total += float(
            stats.invwishart.logpdf(
                params.omega,
                df=priors.omega_df,
                scale=(priors.omega_scale / params.tau_u) * np.eye(dim),
            )
        )
    except (linalg.LinAlgError, ValueError):
        return -np.inf

    total += log_sensitivity_prior(spec, params.rho)
    return total


@dataclass
class PosteriorParts:
    longitudinal: np.ndarray
    survival: np.ndarray
    random_effects: np.ndarray
    prior: float

    @property
    def total(self) -> float:
        value = (
            float(self.longitudinal.sum())
            + float(self.survival.sum())
            + float(self.random_effects.sum())
            + self.prior
        )
        return value if not math.isnan(value) else -np.inf


def log_posterior_parts(
    spec: ModelSpec, params: ParameterState, data: Union[ModelData, Sequence[PatientRecord]]
) -> PosteriorParts:
    if not isinstance(data, ModelData):
        data = prepare_data(spec, data)
    params = _aligned(params, data)

    prior = log_prior(spec, params)
    mean = data.longitudinal_mean(params.beta, params.u)
    longitudinal = data.per_subject(
        longitudinal_logdensity(data.obs_y, mean, params.sigma, spec.priors.kappa)
    )
    survival = data.grid.loglik(params)
    random_effects = random_effects_logdensity(params.u, params.omega)
    return PosteriorParts(
        longitudinal=longitudinal,
        survival=survival,
        random_effects=random_effects,
        prior=prior,
    )


def log_posterior(
    spec: ModelSpec, params: ParameterState, data: Union[ModelData, Sequence[PatientRecord]]
) -> float:
    """Unnormalized log posterior with the marginal t density for the measurements."""
    return log_posterior_parts(spec, params, data).total
