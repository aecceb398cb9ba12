"""Data model and deterministic evaluations of the joint model.

The longitudinal mean for subject i is

    m_i(t) = (b0 + u0) + sum_p (b_p + u_p) C_p(t) + b4 (age - age_center)

with C the natural-spline basis, and the cause-specific hazard is

    h_k(t) = exp(G(t) . g_h0_k + g_k log_psad + a1k m(t) + a2k (m(t) - m(t-1))).
"""

import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Annotated, Any, Literal, Optional, Union

import numpy as np
from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    field_validator,
    model_validator,
)

from src.exceptions import ConfigurationError, InputError, ParameterError
from src.quadrature import CumulativeIntegral, get_rule
from src.spline import (
    BsplineBasis,
    NcsBasis,
    PenaltyMatrix,
    bspline_basis_from_knot_count,
    bspline_design,
    difference_penalty,
    ncs_default_basis,
    ncs_eval,
)

logger = logging.getLogger(__name__)

CAUSES = ("prg", "trt")
N_RANDOM_EFFECTS = 4
N_FIXED_EFFECTS = 5
AGE_CENTER = 62.0
# Knot counts for the log baseline hazard: flexible for a known sensitivity,
# reduced when the sensitivity carries a prior.
FIXED_SENSITIVITY_KNOTS = 11
PRIOR_SENSITIVITY_KNOTS = 4
TIME_TOLERANCE = 1e-9

Cause = Literal["prg", "trt"]


class PatientRecord(BaseModel):
    model_config = ConfigDict(frozen=True)

    id: str
    age: float
    psad: float = Field(gt=0)
    log_psad: Optional[float] = None
    # (time in years, log2(PSA + 1))
    measurements: tuple[tuple[float, float], ...] = ()
    biopsy_times: tuple[float, ...]
    delta: Literal[0, 1, 2]
    terminal_time: float

    @model_validator(mode="before")
    @classmethod
    def fill_log_psad(cls, data: Any) -> Any:
        if isinstance(data, dict) and data.get("log_psad") is None:
            psad = data.get("psad")
            if isinstance(psad, (int, float)) and psad > 0:
                data = {**data, "log_psad": math.log(psad)}
        return data

    @field_validator("measurements", mode="after")
    @classmethod
    def sort_measurements(cls, v: tuple) -> tuple:
        return tuple(sorted(v, key=lambda pair: pair[0]))

    @model_validator(mode="after")
    def validate_record(self):
        values = [self.age, self.psad, self.terminal_time, *self.biopsy_times]
        values += [x for pair in self.measurements for x in pair]
        if not all(math.isfinite(v) for v in values):
            raise ValueError(f"Subject {self.id} has non-finite values")

        biopsies = self.biopsy_times
        if not biopsies or biopsies[0] != 0.0:
            raise ValueError(f"Subject {self.id}: first biopsy must be at time 0")
        if any(b <= a for a, b in zip(biopsies, biopsies[1:])):
            raise ValueError(f"Subject {self.id}: biopsy times must be strictly increasing")

        last = biopsies[-1]
        if self.delta == 1:
            if len(biopsies) < 2:
                raise ValueError(
                    f"Subject {self.id}: detected progression needs a biopsy after baseline"
                )
            if abs(self.terminal_time - last) > TIME_TOLERANCE:
                raise ValueError(
                    f"Subject {self.id}: delta=1 requires terminal_time == last biopsy "
                    f"({self.terminal_time} != {last})"
                )
        elif self.terminal_time < last - TIME_TOLERANCE:
            raise ValueError(
                f"Subject {self.id}: terminal_time {self.terminal_time} precedes the "
                f"last biopsy {last}"
            )

        for t, _ in self.measurements:
            if t < 0 or t > self.terminal_time + TIME_TOLERANCE:
                raise ValueError(
                    f"Subject {self.id}: measurement at t={t} outside [0, {self.terminal_time}]"
                )
        return self

    @property
    def n_intervals(self) -> int:
        return len(self.biopsy_times) - 1

    @property
    def measurement_times(self) -> np.ndarray:
        return np.array([t for t, _ in self.measurements], dtype=float)

    @property
    def measurement_values(self) -> np.ndarray:
        return np.array([y for _, y in self.measurements], dtype=float)


class FixedSensitivity(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: Literal["fixed"] = "fixed"
    rho: float

    @field_validator("rho")
    @classmethod
    def check_rho(cls, v: float) -> float:
        if not 0.0 < v <= 1.0:
            raise ValueError(f"Fixed sensitivity must lie in (0, 1], got {v}")
        return v


class UniformSensitivity(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: Literal["uniform"] = "uniform"
    lo: float
    hi: float

    @model_validator(mode="after")
    def check_bounds(self):
        if not 0.0 <= self.lo < self.hi <= 1.0:
            raise ValueError(
                f"Uniform sensitivity prior needs 0 <= lo < hi <= 1, got ({self.lo}, {self.hi})"
            )
        return self


class BetaSensitivity(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: Literal["beta"] = "beta"
    a: float = Field(gt=0)
    b: float = Field(gt=0)


SensitivityMode = Annotated[
    Union[FixedSensitivity, UniformSensitivity, BetaSensitivity],
    Field(discriminator="kind"),
]


def parse_sensitivity(text: str) -> FixedSensitivity | UniformSensitivity | BetaSensitivity:
    """Parse 'fixed:0.75', 'uniform:0.6,0.9' or 'beta:a,b'."""
    kind, _, args = text.strip().partition(":")
    try:
        numbers = [float(x) for x in args.split(",")] if args else []
        kind = kind.lower()
        if kind == "fixed" and len(numbers) == 1:
            return FixedSensitivity(rho=numbers[0])
        if kind == "uniform" and len(numbers) == 2:
            return UniformSensitivity(lo=numbers[0], hi=numbers[1])
        if kind == "beta" and len(numbers) == 2:
            return BetaSensitivity(a=numbers[0], b=numbers[1])
    except ValueError as e:
        raise ConfigurationError(f"Invalid sensitivity {text!r}: {e}") from e
    raise ConfigurationError(
        f"Invalid sensitivity {text!r}; expected fixed:RHO, uniform:LO,HI or beta:A,B"
    )


def format_sensitivity(mode) -> str:
    if isinstance(mode, FixedSensitivity):
        return f"fixed:{mode.rho:g}"
    if isinstance(mode, UniformSensitivity):
        return f"uniform:{mode.lo:g},{mode.hi:g}"
    return f"beta:{mode.a:g},{mode.b:g}"


class PriorConfig(BaseModel):
    """Hyperparameters; Gamma(shape, rate) and normal priors by variance."""

    model_config = ConfigDict(frozen=True)

    beta_variance: float = Field(default=100.0, gt=0)
    gamma_variance: float = Field(default=100.0, gt=0)
    alpha_variance: float = Field(default=100.0, gt=0)
    # Omega ~ IW(n_u + 1, (omega_scale / tau_u) I)
    omega_df: float = Field(default=N_RANDOM_EFFECTS + 1.0, gt=N_RANDOM_EFFECTS - 1)
    omega_scale: float = Field(default=4.0, gt=0)
    tau_u_shape: float = Field(default=0.5, gt=0)
    tau_u_rate: float = Field(default=0.01, gt=0)
    tau_eps_shape: float = Field(default=0.01, gt=0)
    tau_eps_rate: float = Field(default=0.01, gt=0)
    tau_h0_shape: float = Field(default=5.0, gt=0)
    tau_h0_rate: float = Field(default=0.5, gt=0)
    kappa: float = Field(default=3.0, gt=0)


class PenaltyConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    order: int = Field(default=2, ge=1)
    ridge: float = Field(default=1e-6, gt=0)
    rank_mode: Literal["unridged", "full"] = "unridged"


class ModelSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    ncs: NcsBasis
    bh_basis: dict[str, BsplineBasis]
    penalty: PenaltyConfig = PenaltyConfig()
    sensitivity: SensitivityMode
    priors: PriorConfig = PriorConfig()
    quadrature: Literal["gk15", "gk7"] = "gk15"
    age_center: float = AGE_CENTER

    @model_validator(mode="after")
    def validate_spec(self):
        if set(self.bh_basis) != set(CAUSES):
            raise ValueError(f"bh_basis needs exactly the causes {CAUSES}, got {sorted(self.bh_basis)}")
        if self.ncs.df != N_RANDOM_EFFECTS - 1:
            raise ValueError(
                f"Longitudinal model needs a {N_RANDOM_EFFECTS - 1}-df natural spline, got df={self.ncs.df}"
            )
        for cause, basis in self.bh_basis.items():
            if basis.n_basis <= self.penalty.order:
                raise ValueError(
                    f"Penalty order {self.penalty.order} too high for the {cause} basis "
                    f"with {basis.n_basis} functions"
                )
        return self

    def basis(self, cause: Cause) -> BsplineBasis:
        return self.bh_basis[cause]

    def penalty_matrix(self, cause: Cause) -> PenaltyMatrix:
        return _penalty(
            self.bh_basis[cause].n_basis,
            self.penalty.order,
            self.penalty.ridge,
            self.penalty.rank_mode,
        )

    @property
    def rule(self):
        return get_rule(self.quadrature)

    @property
    def estimates_rho(self) -> bool:
        return not isinstance(self.sensitivity, FixedSensitivity)

    def breakpoints(self) -> tuple[float, ...]:
        """Times where the hazard integrand loses smoothness."""
        ncs = (*self.ncs.boundary_knots, *self.ncs.internal_knots)
        points = set(ncs) | {k + 1.0 for k in ncs}
        for basis in self.bh_basis.values():
            points |= set(basis.knots)
        return tuple(sorted(p for p in points if p > 0))


@lru_cache(maxsize=32)
def _penalty(n_basis: int, order: int, ridge: float, rank_mode: str) -> PenaltyMatrix:
    return difference_penalty(n_basis, order, ridge=ridge, rank_mode=rank_mode)


def default_knot_count(sensitivity) -> int:
    if isinstance(sensitivity, FixedSensitivity):
        return FIXED_SENSITIVITY_KNOTS
    return PRIOR_SENSITIVITY_KNOTS


def build_model_spec(
    patients: list[PatientRecord],
    sensitivity,
    n_knots: Optional[int] = None,
    penalty: Optional[PenaltyConfig] = None,
    priors: Optional[PriorConfig] = None,
    quadrature: str = "gk15",
    ncs: Optional[NcsBasis] = None,
    bh_horizon: Optional[float] = None,
    age_center: float = AGE_CENTER,
) -> ModelSpec:
    """Derive a ModelSpec from a dataset, filling knot placements from the data."""
    if not patients:
        raise InputError("Cannot build a model spec from an empty dataset")

    follow_up = max(p.terminal_time for p in patients)
    if ncs is None:
        times = np.concatenate([p.measurement_times for p in patients])
        ncs = ncs_default_basis(times, follow_up)
    horizon = bh_horizon if bh_horizon is not None else follow_up
    n_knots = n_knots or default_knot_count(sensitivity)
    basis = bspline_basis_from_knot_count(n_knots, horizon)

    try:
        return ModelSpec(
            ncs=ncs,
            bh_basis={cause: basis for cause in CAUSES},
            penalty=penalty or PenaltyConfig(),
            sensitivity=sensitivity,
            priors=priors or PriorConfig(),
            quadrature=quadrature,
            age_center=age_center,
        )
    except ValueError as e:
        raise ConfigurationError(f"Invalid model spec: {e}") from e


@dataclass
class ParameterState:
    beta: np.ndarray
    u: np.ndarray
    omega: np.ndarray
    tau_eps: float
    tau_u: float
    gamma_h0: dict[str, np.ndarray]
    tau_h0: dict[str, float]
    gamma: dict[str, float]
    alpha: dict[str, np.ndarray]
    rho: float
    subject_ids: tuple[str, ...] = ()
    # Per-measurement scale-mixture weights, only used inside the sampler
    lam: Optional[np.ndarray] = None
    _index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=float)
        self.u = np.asarray(self.u, dtype=float).reshape(-1, N_RANDOM_EFFECTS)
        self.omega = np.asarray(self.omega, dtype=float)
        self.gamma_h0 = {k: np.asarray(v, dtype=float) for k, v in self.gamma_h0.items()}
        self.alpha = {k: np.asarray(v, dtype=float) for k, v in self.alpha.items()}
        self.subject_ids = tuple(self.subject_ids)
        if self.subject_ids and len(self.subject_ids) != self.u.shape[0]:
            raise ParameterError(
                f"{len(self.subject_ids)} subject ids for {self.u.shape[0]} random-effect rows"
            )
        self._index = {sid: i for i, sid in enumerate(self.subject_ids)}

    def random_effects(self, subject_id: str) -> np.ndarray:
        if subject_id not in self._index:
            raise ParameterError(f"No random effects for subject {subject_id}")
        return self.u[self._index[subject_id]]

    @property
    def sigma(self) -> float:
        return 1.0 / math.sqrt(self.tau_eps)

    def validate(self) -> None:
        if self.beta.shape != (N_FIXED_EFFECTS,):
            raise ParameterError(f"beta must have {N_FIXED_EFFECTS} entries, got {self.beta.shape}")
        if self.omega.shape != (N_RANDOM_EFFECTS, N_RANDOM_EFFECTS):
            raise ParameterError(f"omega must be {N_RANDOM_EFFECTS}x{N_RANDOM_EFFECTS}")
        if not np.allclose(self.omega, self.omega.T):
            raise ParameterError("omega must be symmetric")
        try:
            np.linalg.cholesky(self.omega)
        except np.linalg.LinAlgError as e:
            raise ParameterError("omega must be positive definite") from e
        positives = {"tau_eps": self.tau_eps, "tau_u": self.tau_u}
        positives.update({f"tau_h0_{k}": v for k, v in self.tau_h0.items()})
        for name, value in positives.items():
            if not (math.isfinite(value) and value > 0):
                raise ParameterError(f"{name} must be positive, got {value}")
        if self.lam is not None and np.any(self.lam <= 0):
            raise ParameterError("mixture weights must be positive")
        if not 0.0 <= self.rho <= 1.0:
            raise ParameterError(f"rho must lie in [0, 1], got {self.rho}")
        for k in CAUSES:
            if self.alpha[k].shape != (2,):
                raise ParameterError(f"alpha[{k}] must have two entries")

    def copy(self) -> "ParameterState":
        return ParameterState(
            beta=self.beta.copy(),
            u=self.u.copy(),
            omega=self.omega.copy(),
            tau_eps=self.tau_eps,
            tau_u=self.tau_u,
            gamma_h0={k: v.copy() for k, v in self.gamma_h0.items()},
            tau_h0=dict(self.tau_h0),
            gamma=dict(self.gamma),
            alpha={k: v.copy() for k, v in self.alpha.items()},
            rho=self.rho,
            subject_ids=self.subject_ids,
            lam=None if self.lam is None else self.lam.copy(),
        )

    def to_dict(self) -> dict:
        return {
            "beta": self.beta.tolist(),
            "u": self.u.tolist(),
            "omega": self.omega.tolist(),
            "tau_eps": float(self.tau_eps),
            "tau_u": float(self.tau_u),
            "gamma_h0": {k: v.tolist() for k, v in self.gamma_h0.items()},
            "tau_h0": {k: float(v) for k, v in self.tau_h0.items()},
            "gamma": {k: float(v) for k, v in self.gamma.items()},
            "alpha": {k: v.tolist() for k, v in self.alpha.items()},
            "rho": float(self.rho),
            "subject_ids": list(self.subject_ids),
            "lam": None if self.lam is None else self.lam.tolist(),
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "ParameterState":
        lam = payload.get("lam")
        return cls(
            beta=payload["beta"],
            u=payload.get("u", []),
            omega=payload["omega"],
            tau_eps=float(payload["tau_eps"]),
            tau_u=float(payload.get("tau_u", 1.0)),
            gamma_h0=payload["gamma_h0"],
            tau_h0={k: float(v) for k, v in payload.get("tau_h0", {k: 1.0 for k in CAUSES}).items()},
            gamma={k: float(v) for k, v in payload["gamma"].items()},
            alpha=payload["alpha"],
            rho=float(payload["rho"]),
            subject_ids=payload.get("subject_ids", ()),
            lam=None if lam is None else np.asarray(lam, dtype=float),
        )


def random_effects_design(spec: ModelSpec, t) -> np.ndarray:
    """Rows [1, C1(t), C2(t), C3(t)]; shape t.shape + (4,)."""
    basis = ncs_eval(spec.ncs, t)
    ones = np.ones(basis.shape[:-1] + (1,))
    return np.concatenate([ones, basis], axis=-1)


def mean_from_design(
    design: np.ndarray, beta: np.ndarray, u: np.ndarray, age_offset
) -> np.ndarray:
    """design @ (beta[:4] + u) + beta[4] * age_offset, broadcasting u per row."""
    coefficients = beta[:N_RANDOM_EFFECTS] + u
    if coefficients.ndim == 1:
        return design @ coefficients + beta[4] * age_offset
    return np.einsum("...j,...j->...", design, coefficients) + beta[4] * age_offset


def _subject_mean(spec: ModelSpec, beta, u, age: float, t) -> np.ndarray:
    return mean_from_design(random_effects_design(spec, t), beta, u, age - spec.age_center)


def longitudinal_mean(spec: ModelSpec, params: ParameterState, subject: PatientRecord, t):
    x = np.asarray(t, dtype=float)
    if not np.all(np.isfinite(x)):
        raise InputError(f"Longitudinal mean requires finite times, got {t!r}")
    return _subject_mean(spec, params.beta, params.random_effects(subject.id), subject.age, x)


def population_trajectory(spec: ModelSpec, beta, age: float, times) -> np.ndarray:
    """Mean trajectory with all random effects at zero."""
    beta = np.asarray(beta, dtype=float)
    return _subject_mean(spec, beta, np.zeros(N_RANDOM_EFFECTS), age, np.asarray(times, dtype=float))


def association(alpha_k: np.ndarray, m_now, m_prev):
    return alpha_k[0] * m_now + alpha_k[1] * (m_now - m_prev)


def functional_form(
    spec: ModelSpec, params: ParameterState, subject: PatientRecord, t, cause: Cause
):
    t = np.asarray(t, dtype=float)
    m_now = longitudinal_mean(spec, params, subject, t)
    m_prev = longitudinal_mean(spec, params, subject, t - 1.0)
    return association(params.alpha[cause], m_now, m_prev)


def log_baseline_hazard(spec: ModelSpec, gamma_h0, cause: Cause, times) -> np.ndarray:
    design = bspline_design(spec.basis(cause), times)
    return design @ np.asarray(gamma_h0, dtype=float)


def log_hazard(
    spec: ModelSpec, params: ParameterState, subject: PatientRecord, t, cause: Cause
) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    return (
        log_baseline_hazard(spec, params.gamma_h0[cause], cause, t)
        + params.gamma[cause] * subject.log_psad
        + functional_form(spec, params, subject, t, cause)
    )


def hazard(spec: ModelSpec, params: ParameterState, subject: PatientRecord, t, cause: Cause):
    return np.exp(log_hazard(spec, params, subject, t, cause))


def cumulative_hazard(
    spec: ModelSpec, params: ParameterState, subject: PatientRecord, t, cause: Cause
):
    """Integral of the cause-specific hazard over [0, t]."""
    cumulative = CumulativeIntegral(
        spec.rule,
        lambda x: hazard(spec, params, subject, x, cause),
        lower=0.0,
        breakpoints=spec.breakpoints(),
    )
    result = cumulative(t)
    return float(result) if np.ndim(t) == 0 else result
