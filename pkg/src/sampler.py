"""Metropolis-within-Gibbs sampler for the joint model.

Conjugate updates: scale-mixture weights, tau_eps, Omega, tau_u (generalized
inverse Gaussian conditional) and the smoothing precisions tau_h0. Everything
else moves by adaptive Gaussian random walks on the unconstrained scale; the
sensitivity, when it carries a prior, moves on the logit of its support.
"""

import json
import logging
import math
import multiprocessing as mp
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, NamedTuple, Optional, Sequence, Union

import numpy as np
import pandas as pd
from opentelemetry import trace
from pydantic import BaseModel, Field, model_validator
from scipy import stats
from scipy.special import expit, log_expit

from src.exceptions import ChainInitializationError, NumericalError
from src.likelihood import (
    ModelData,
    ProgressionTerms,
    augmented_longitudinal_loglik,
    log_penalized_spline_prior,
    log_posterior_parts,
    log_sensitivity_prior,
    prepare_data,
    random_effects_logdensity,
)
from src.model_core import (
    CAUSES,
    N_FIXED_EFFECTS,
    N_RANDOM_EFFECTS,
    FixedSensitivity,
    ModelSpec,
    ParameterState,
    PatientRecord,
    PriorConfig,
    UniformSensitivity,
)
from src.logging_conf import setup_logging
from src.retry import retry
from src.settings import config as settings

logger = logging.getLogger(__name__)
tracer = trace.get_tracer(__name__)

ADAPT_EXPONENT = 0.6
COVARIANCE_WARMUP = 100
COVARIANCE_REFRESH = 50
INIT_ATTEMPTS = 10


class SamplerConfig(BaseModel):
    n_chains: int = Field(default=3, ge=1)
    n_iterations: int = Field(default=10000, ge=1)
    thin: int = Field(default=10, ge=1)
    n_adapt: int = Field(default=2000, ge=0)
    seed: Optional[int] = Field(default=None, ge=0, lt=2**64)
    target_acceptance_block: float = Field(default=0.234, gt=0, lt=1)
    target_acceptance_scalar: float = Field(default=0.44, gt=0, lt=1)
    # "joint" moves gamma_k and alpha_k together
    association_block: str = Field(default="separate", pattern="^(separate|joint)$")
    save_random_effects: bool = False

    @model_validator(mode="after")
    def validate_schedule(self):
        if self.n_adapt >= self.n_iterations:
            raise ValueError(
                f"n_adapt ({self.n_adapt}) must be smaller than n_iterations ({self.n_iterations})"
            )
        if self.n_iterations % self.thin:
            raise ValueError(f"n_iterations {self.n_iterations} is not divisible by thin {self.thin}")
        if (self.n_iterations - self.n_adapt) % self.thin:
            raise ValueError(
                f"Post-adaptation iterations ({self.n_iterations - self.n_adapt}) "
                f"are not divisible by thin {self.thin}"
            )
        return self

    @property
    def n_draws(self) -> int:
        return (self.n_iterations - self.n_adapt) // self.thin


def gibbs_update_mixture_weights(
    residuals: np.ndarray, tau_eps: float, kappa: float, rng: np.random.Generator
) -> np.ndarray:
    """lambda ~ Gamma((kappa + 1)/2, rate (kappa + tau_eps r^2)/2)."""
    residuals = np.asarray(residuals, dtype=float)
    shape = 0.5 * (kappa + 1.0)
    rate = 0.5 * (kappa + tau_eps * residuals**2)
    return rng.gamma(shape, 1.0 / rate)


def gibbs_update_tau_eps(
    residuals: np.ndarray, lam: np.ndarray, priors: PriorConfig, rng: np.random.Generator
) -> float:
    shape = priors.tau_eps_shape + 0.5 * residuals.size
    rate = priors.tau_eps_rate + 0.5 * float(np.sum(lam * residuals**2))
    return float(rng.gamma(shape, 1.0 / rate))


def gibbs_update_omega(
    u_all: np.ndarray, tau_u: float, priors: PriorConfig, rng: np.random.Generator
) -> np.ndarray:
    """Exact draw from IW(df + n, (scale / tau_u) I + sum u_i u_i')."""
    u_all = np.asarray(u_all, dtype=float).reshape(-1, N_RANDOM_EFFECTS)
    dim = N_RANDOM_EFFECTS
    df = priors.omega_df + u_all.shape[0]
    scale = (priors.omega_scale / tau_u) * np.eye(dim) + u_all.T @ u_all
    scale = 0.5 * (scale + scale.T)

    for jitter in (0.0, 1e-10):
        try:
            draw = stats.invwishart.rvs(df=df, scale=scale + jitter * np.eye(dim), random_state=rng)
            draw = 0.5 * (draw + draw.T)
            np.linalg.cholesky(draw)
            return draw
        except (np.linalg.LinAlgError, ValueError) as e:
            logger.warning(f"Inverse-Wishart draw failed (jitter={jitter}): {e}")
    raise NumericalError("Random-effect covariance update produced a non-SPD matrix")


def gibbs_update_tau_u(omega: np.ndarray, priors: PriorConfig, rng: np.random.Generator) -> float:
    """tau_u | Omega ~ GIG(p, a, b): the IW normalizer couples tau_u to Omega."""
    dim = omega.shape[0]
    p = priors.tau_u_shape - 0.5 * priors.omega_df * dim
    a = 2.0 * priors.tau_u_rate
    b = priors.omega_scale * float(np.trace(np.linalg.inv(omega)))
    return float(
        stats.geninvgauss.rvs(p, math.sqrt(a * b), scale=math.sqrt(b / a), random_state=rng)
    )


def gibbs_update_tau_h0(
    gamma_h0: np.ndarray, penalty_matrix: np.ndarray, rank_term: int, priors: PriorConfig, rng
) -> float:
    shape = priors.tau_h0_shape + 0.5 * rank_term
    rate = priors.tau_h0_rate + 0.5 * float(gamma_h0 @ penalty_matrix @ gamma_h0)
    return float(rng.gamma(shape, 1.0 / rate))


@dataclass
class AdaptiveBlock:
    """Random-walk proposal with Robbins-Monro scale and empirical covariance."""

    name: str
    dim: int
    target: float
    init_sd: float
    log_scale: float = 0.0
    shape_chol: Optional[np.ndarray] = None
    mean: Optional[np.ndarray] = None
    cov: Optional[np.ndarray] = None
    n_seen: int = 0
    n_proposed: int = 0
    n_accepted: int = 0

    def __post_init__(self):
        if self.shape_chol is None:
            self.shape_chol = self.init_sd * np.eye(self.dim)
            self.log_scale = 0.0
        if self.mean is None:
            self.mean = np.zeros(self.dim)
            self.cov = np.zeros((self.dim, self.dim))
        self.shape_chol = np.asarray(self.shape_chol, dtype=float)
        self.mean = np.asarray(self.mean, dtype=float)
        self.cov = np.asarray(self.cov, dtype=float)

    def propose(self, rng: np.random.Generator, x: np.ndarray) -> np.ndarray:
        step = self.shape_chol @ rng.standard_normal(self.dim)
        return x + math.exp(self.log_scale) * step

    def adapt(self, x: np.ndarray, accept_prob: float, iteration: int) -> None:
        self.log_scale += (iteration + 1) ** -ADAPT_EXPONENT * (accept_prob - self.target)
        self.n_seen += 1
        delta = x - self.mean
        self.mean = self.mean + delta / self.n_seen
        self.cov = self.cov + (np.outer(delta, x - self.mean) - self.cov) / self.n_seen

        if self.dim > 1 and self.n_seen >= COVARIANCE_WARMUP and self.n_seen % COVARIANCE_REFRESH == 0:
            try:
                chol = np.linalg.cholesky(self.cov + 1e-10 * np.eye(self.dim))
            except np.linalg.LinAlgError:
                return
            if self.n_seen == COVARIANCE_WARMUP:
                self.log_scale = math.log(2.38 / math.sqrt(self.dim))
            self.shape_chol = chol

    @property
    def acceptance_rate(self) -> float:
        return self.n_accepted / self.n_proposed if self.n_proposed else float("nan")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "dim": self.dim,
            "target": self.target,
            "init_sd": self.init_sd,
            "log_scale": self.log_scale,
            "shape_chol": self.shape_chol.tolist(),
            "mean": self.mean.tolist(),
            "cov": self.cov.tolist(),
            "n_seen": self.n_seen,
            "n_proposed": self.n_proposed,
            "n_accepted": self.n_accepted,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "AdaptiveBlock":
        return cls(**payload)


class MHResult(NamedTuple):
    value: np.ndarray
    log_target: float
    accepted: bool


def mh_update_block(
    block: AdaptiveBlock,
    current: np.ndarray,
    current_log_target: float,
    log_target: Callable[[np.ndarray], float],
    rng: np.random.Generator,
    adapt_iteration: Optional[int] = None,
    proposal: Optional[np.ndarray] = None,
) -> MHResult:
    """One random-walk Metropolis step; adapts the block only when adapt_iteration is given."""
    current = np.asarray(current, dtype=float)
    candidate = block.propose(rng, current) if proposal is None else np.asarray(proposal, dtype=float)
    log_u = math.log(rng.random())
    candidate_log_target = float(log_target(candidate))

    if np.isfinite(candidate_log_target):
        log_ratio = candidate_log_target - current_log_target
        accept = log_ratio >= 0 or log_u < log_ratio
        accept_prob = 1.0 if log_ratio >= 0 else math.exp(log_ratio)
    else:
        accept, accept_prob = False, 0.0

    block.n_proposed += 1
    block.n_accepted += int(accept)
    result = (
        MHResult(candidate, candidate_log_target, True)
        if accept
        else MHResult(current, current_log_target, False)
    )
    if adapt_iteration is not None:
        block.adapt(result.value, accept_prob, adapt_iteration)
    return result


def _sensitivity_bounds(spec: ModelSpec) -> tuple[float, float]:
    mode = spec.sensitivity
    if isinstance(mode, UniformSensitivity):
        return mode.lo, mode.hi
    return 0.0, 1.0


def rho_from_logit(spec: ModelSpec, z: float) -> float:
    lo, hi = _sensitivity_bounds(spec)
    return lo + (hi - lo) * float(expit(z))


def logit_from_rho(spec: ModelSpec, rho: float) -> float:
    lo, hi = _sensitivity_bounds(spec)
    p = min(max((rho - lo) / (hi - lo), 1e-12), 1 - 1e-12)
    return math.log(p) - math.log1p(-p)


def rho_log_jacobian(spec: ModelSpec, z: float) -> float:
    lo, hi = _sensitivity_bounds(spec)
    return math.log(hi - lo) + float(log_expit(z)) + float(log_expit(-z))


def parameter_names(spec: ModelSpec) -> list[str]:
    names = [f"beta_{i}" for i in range(N_FIXED_EFFECTS)]
    for cause in CAUSES:
        names.append(f"gamma_{cause}")
        names += [f"alpha_{cause}_{a}" for a in (1, 2)]
    for cause in CAUSES:
        names += [f"gamma_h0_{cause}_{a + 1}" for a in range(spec.basis(cause).n_basis)]
        names.append(f"tau_h0_{cause}")
    names += ["tau_eps", "sigma", "tau_u"]
    names += [
        f"omega_{i + 1}_{j + 1}"
        for i in range(N_RANDOM_EFFECTS)
        for j in range(i, N_RANDOM_EFFECTS)
    ]
    names.append("rho")
    return names


def flatten_state(params: ParameterState) -> np.ndarray:
    values = list(params.beta)
    for cause in CAUSES:
        values.append(params.gamma[cause])
        values += list(params.alpha[cause])
    for cause in CAUSES:
        values += list(params.gamma_h0[cause])
        values.append(params.tau_h0[cause])
    values += [params.tau_eps, params.sigma, params.tau_u]
    rows, cols = np.triu_indices(N_RANDOM_EFFECTS)
    values += list(params.omega[rows, cols])
    values.append(params.rho)
    return np.asarray(values, dtype=float)


@dataclass
class ChainState:
    """Everything needed to continue a chain bit-for-bit."""

    chain: int
    iteration: int
    params: ParameterState
    blocks: dict[str, AdaptiveBlock]
    u_log_scale: np.ndarray
    rng_state: dict
    draws: list[list[float]] = field(default_factory=list)
    draw_iterations: list[int] = field(default_factory=list)
    u_sum: Optional[np.ndarray] = None
    u_accepted: int = 0
    u_proposed: int = 0

    def to_dict(self) -> dict:
        return {
            "chain": self.chain,
            "iteration": self.iteration,
            "params": self.params.to_dict(),
            "blocks": {k: b.to_dict() for k, b in self.blocks.items()},
            "u_log_scale": self.u_log_scale.tolist(),
            "rng_state": self.rng_state,
            "draws": self.draws,
            "draw_iterations": self.draw_iterations,
            "u_sum": None if self.u_sum is None else self.u_sum.tolist(),
            "u_accepted": self.u_accepted,
            "u_proposed": self.u_proposed,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "ChainState":
        u_sum = payload.get("u_sum")
        return cls(
            chain=payload["chain"],
            iteration=payload["iteration"],
            params=ParameterState.from_dict(payload["params"]),
            blocks={k: AdaptiveBlock.from_dict(b) for k, b in payload["blocks"].items()},
            u_log_scale=np.asarray(payload["u_log_scale"], dtype=float),
            rng_state=payload["rng_state"],
            draws=payload["draws"],
            draw_iterations=payload["draw_iterations"],
            u_sum=None if u_sum is None else np.asarray(u_sum, dtype=float),
            u_accepted=payload.get("u_accepted", 0),
            u_proposed=payload.get("u_proposed", 0),
        )

    def save(self, path: Path) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path: Path) -> "ChainState":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _restore_rng(state: dict) -> np.random.Generator:
    bit_generator = getattr(np.random, state["bit_generator"])()
    bit_generator.state = state
    return np.random.Generator(bit_generator)


class ChainRunner:
    """Runs one chain; caches per-subject likelihood parts between block updates."""

    def __init__(self, spec: ModelSpec, data: ModelData, sampler_config: SamplerConfig):
        self.spec = spec
        self.data = data
        self.config = sampler_config
        self.priors = spec.priors
        self.rank_terms = {c: spec.penalty_matrix(c).rank_term for c in CAUSES}
        self.penalties = {c: spec.penalty_matrix(c).matrix for c in CAUSES}

    # ------------------------------------------------------------------ init

    def _crude_log_rate(self, params: ParameterState, cause: str) -> float:
        events = int(np.sum(self.data.grid.delta == (1 if cause == "prg" else 2)))
        events = max(events, 0.5)
        if cause == "prg":
            exposure = float(np.sum(self.data.grid.progression_terms(params).cumulative_last))
        else:
            exposure = float(np.sum(self.data.grid.treatment_cumulative(params)))
        return math.log(events) - math.log(max(exposure, 1e-12))

    def _penalized_draw(self, cause: str, tau: float, rng: np.random.Generator) -> np.ndarray:
        """Prior draw of the baseline coefficients restricted to the penalized directions."""
        eigenvalues, eigenvectors = np.linalg.eigh(self.penalties[cause])
        keep = eigenvalues > 1e-3
        z = rng.standard_normal(int(keep.sum())) / np.sqrt(tau * eigenvalues[keep])
        return eigenvectors[:, keep] @ z

    def _draw_initial(self, chain: int, rng: np.random.Generator) -> ParameterState:
        data = self.data
        priors = self.priors
        x = data.fixed_effects_design()
        if data.n_measurements >= N_FIXED_EFFECTS:
            beta = np.linalg.lstsq(x, data.obs_y, rcond=None)[0]
        else:
            beta = np.zeros(N_FIXED_EFFECTS)
        beta = beta + rng.normal(0.0, 0.1, N_FIXED_EFFECTS)
        residual = data.obs_y - x @ beta
        tau_eps = 1.0 / max(float(np.var(residual)) if residual.size > 1 else 1.0, 1e-3)

        mode = self.spec.sensitivity
        if isinstance(mode, FixedSensitivity):
            rho = mode.rho
        elif isinstance(mode, UniformSensitivity):
            rho = float(rng.uniform(mode.lo, mode.hi))
        else:
            rho = float(rng.beta(mode.a, mode.b))

        zero = {c: np.zeros(self.spec.basis(c).n_basis) for c in CAUSES}
        params = ParameterState(
            beta=beta,
            u=rng.normal(0.0, 0.1, (data.n_subjects, N_RANDOM_EFFECTS)),
            omega=np.diag(rng.uniform(0.2, 1.0, N_RANDOM_EFFECTS)),
            tau_eps=tau_eps,
            tau_u=1.0,
            gamma_h0=zero,
            tau_h0={c: float(rng.gamma(priors.tau_h0_shape, 1.0 / priors.tau_h0_rate)) for c in CAUSES},
            gamma={c: 0.1 * float(rng.normal(0.0, math.sqrt(priors.gamma_variance))) for c in CAUSES},
            alpha={c: 0.1 * rng.normal(0.0, math.sqrt(priors.alpha_variance), 2) for c in CAUSES},
            rho=rho,
            subject_ids=data.subject_ids,
            lam=np.ones(data.n_measurements),
        )
        # Baseline level from the crude event rate at the initial covariate effects
        gamma_h0 = {}
        for cause in CAUSES:
            level = self._crude_log_rate(params, cause)
            gamma_h0[cause] = level + self._penalized_draw(cause, params.tau_h0[cause], rng) * 0.1
        params = replace(params, gamma_h0=gamma_h0)

        parts = log_posterior_parts(self.spec, params, data)
        if not np.isfinite(parts.total):
            raise ChainInitializationError(
                f"[chain={chain}] Non-finite initial log posterior: "
                f"longitudinal={parts.longitudinal.sum():.4g} survival={parts.survival.sum():.4g} "
                f"random_effects={parts.random_effects.sum():.4g} prior={parts.prior:.4g}"
            )
        return params

    def _blocks(self) -> dict[str, AdaptiveBlock]:
        cfg = self.config

        def target(dim: int) -> float:
            return cfg.target_acceptance_block if dim > 1 else cfg.target_acceptance_scalar

        blocks = {"beta": AdaptiveBlock("beta", N_FIXED_EFFECTS, target(N_FIXED_EFFECTS), 0.02)}
        for cause in CAUSES:
            if cfg.association_block == "joint":
                blocks[f"association_{cause}"] = AdaptiveBlock(f"association_{cause}", 3, target(3), 0.05)
            else:
                blocks[f"gamma_{cause}"] = AdaptiveBlock(f"gamma_{cause}", 1, target(1), 0.1)
                blocks[f"alpha_{cause}"] = AdaptiveBlock(f"alpha_{cause}", 2, target(2), 0.05)
            dim = self.spec.basis(cause).n_basis
            blocks[f"gamma_h0_{cause}"] = AdaptiveBlock(f"gamma_h0_{cause}", dim, target(dim), 0.05)
        if self.spec.estimates_rho:
            blocks["rho"] = AdaptiveBlock("rho", 1, target(1), 0.5)
        return blocks

    def initialize(self, chain: int, rng: np.random.Generator) -> ChainState:
        draw = retry(attempts=INIT_ATTEMPTS, retry_on=(ChainInitializationError,))(self._draw_initial)
        params = draw(chain, rng)
        return ChainState(
            chain=chain,
            iteration=0,
            params=params,
            blocks=self._blocks(),
            u_log_scale=np.full(self.data.n_subjects, math.log(0.5)),
            rng_state=rng.bit_generator.state,
            u_sum=np.zeros((self.data.n_subjects, N_RANDOM_EFFECTS)),
        )

    # ---------------------------------------------------------------- caches

    def _refresh(self, params: ParameterState) -> None:
        data = self.data
        self.residual = data.obs_y - data.longitudinal_mean(params.beta, params.u)
        self.aug = data.per_subject(
            augmented_longitudinal_loglik(data.obs_y, data.obs_y - self.residual, params.tau_eps, params.lam)
        )
        self.prg_terms = data.grid.progression_terms(params)
        self.prg = data.grid.progression_loglik(self.prg_terms, params.rho)
        self.trt = data.grid.treatment_loglik(params)
        self.re = random_effects_logdensity(params.u, params.omega)

    def _augmented(self, params: ParameterState, beta: np.ndarray, u: np.ndarray) -> np.ndarray:
        data = self.data
        mean = data.longitudinal_mean(beta, u)
        return data.per_subject(augmented_longitudinal_loglik(data.obs_y, mean, params.tau_eps, params.lam))

    def _cause_loglik(self, trial: ParameterState, cause: str):
        grid = self.data.grid
        if cause == "prg":
            terms = grid.progression_terms(trial)
            return terms, grid.progression_loglik(terms, trial.rho)
        return None, grid.treatment_loglik(trial)

    def _store_cause(self, cause: str, terms, values) -> None:
        if cause == "prg":
            self.prg_terms, self.prg = terms, values
        else:
            self.trt = values

    # ----------------------------------------------------------------- sweep

    def _update_beta(self, state: ChainState, rng, adapt_iteration) -> None:
        params = state.params
        variance = self.priors.beta_variance

        def evaluate(beta):
            trial = replace(params, beta=beta)
            aug = self._augmented(params, beta, params.u)
            prg_terms, prg = self._cause_loglik(trial, "prg")
            _, trt = self._cause_loglik(trial, "trt")
            prior = -0.5 * float(beta @ beta) / variance
            return float(aug.sum() + prg.sum() + trt.sum()) + prior, (aug, prg_terms, prg, trt)

        current = float(self.aug.sum() + self.prg.sum() + self.trt.sum()) - 0.5 * float(
            params.beta @ params.beta
        ) / variance
        cache = {}

        def log_target(beta):
            value, parts = evaluate(beta)
            cache["parts"] = parts
            return value

        result = mh_update_block(state.blocks["beta"], params.beta, current, log_target, rng, adapt_iteration)
        if result.accepted:
            state.params = replace(params, beta=result.value)
            self.aug, self.prg_terms, self.prg, self.trt = cache["parts"]
            self.residual = self.data.obs_y - self.data.longitudinal_mean(result.value, params.u)

    def _update_random_effects(self, state: ChainState, rng, adapt_iteration) -> None:
        params = state.params
        grid = self.data.grid
        chol = np.linalg.cholesky(params.omega)
        z = rng.standard_normal((self.data.n_subjects, N_RANDOM_EFFECTS))
        proposal = params.u + np.exp(state.u_log_scale)[:, None] * (z @ chol.T)
        log_u = np.log(rng.random(self.data.n_subjects))

        trial = replace(params, u=proposal)
        aug = self._augmented(params, params.beta, proposal)
        prg_terms = grid.progression_terms(trial)
        prg = grid.progression_loglik(prg_terms, params.rho)
        trt = grid.treatment_loglik(trial)
        re = random_effects_logdensity(proposal, params.omega)

        current = self.aug + self.prg + self.trt + self.re
        candidate = aug + prg + trt + re
        with np.errstate(invalid="ignore", over="ignore"):
            log_ratio = candidate - current
            accept = np.isfinite(candidate) & (log_u < log_ratio)
            accept_prob = np.where(np.isfinite(candidate), np.minimum(1.0, np.exp(np.minimum(log_ratio, 0.0))), 0.0)

        state.u_proposed += accept.size
        state.u_accepted += int(accept.sum())
        if adapt_iteration is not None:
            step = (adapt_iteration + 1) ** -ADAPT_EXPONENT
            state.u_log_scale = state.u_log_scale + step * (accept_prob - self.config.target_acceptance_block)
        if not accept.any():
            return

        u = np.where(accept[:, None], proposal, params.u)
        state.params = replace(params, u=u)
        self.aug = np.where(accept, aug, self.aug)
        self.prg = np.where(accept, prg, self.prg)
        self.trt = np.where(accept, trt, self.trt)
        self.re = np.where(accept, re, self.re)
        self.prg_terms = ProgressionTerms(
            log_interval_prob=np.where(
                accept[:, None], prg_terms.log_interval_prob, self.prg_terms.log_interval_prob
            ),
            cumulative_last=np.where(accept, prg_terms.cumulative_last, self.prg_terms.cumulative_last),
        )
        self.residual = self.data.obs_y - self.data.longitudinal_mean(params.beta, u)

    def _update_cause_block(self, state: ChainState, cause: str, block_name: str, rng, adapt_iteration):
        params = state.params
        priors = self.priors
        current_values = self.prg if cause == "prg" else self.trt

        if block_name.startswith("gamma_h0"):
            current_x = params.gamma_h0[cause]

            def build(x):
                return replace(params, gamma_h0={**params.gamma_h0, cause: x})

            def prior(x):
                return log_penalized_spline_prior(self.spec, cause, x, params.tau_h0[cause])

        elif block_name.startswith("gamma"):
            current_x = np.array([params.gamma[cause]])

            def build(x):
                return replace(params, gamma={**params.gamma, cause: float(x[0])})

            def prior(x):
                return -0.5 * float(x[0] ** 2) / priors.gamma_variance

        elif block_name.startswith("alpha"):
            current_x = params.alpha[cause]

            def build(x):
                return replace(params, alpha={**params.alpha, cause: x})

            def prior(x):
                return -0.5 * float(x @ x) / priors.alpha_variance

        else:
            current_x = np.r_[params.gamma[cause], params.alpha[cause]]

            def build(x):
                return replace(
                    params,
                    gamma={**params.gamma, cause: float(x[0])},
                    alpha={**params.alpha, cause: x[1:]},
                )

            def prior(x):
                return (
                    -0.5 * float(x[0] ** 2) / priors.gamma_variance
                    - 0.5 * float(x[1:] @ x[1:]) / priors.alpha_variance
                )

        cache = {}

        def log_target(x):
            prior_value = prior(x)
            if not np.isfinite(prior_value):
                return -np.inf
            terms, values = self._cause_loglik(build(x), cause)
            cache["parts"] = (terms, values)
            return float(values.sum()) + prior_value

        current = float(current_values.sum()) + prior(current_x)
        result = mh_update_block(state.blocks[block_name], current_x, current, log_target, rng, adapt_iteration)
        if result.accepted:
            state.params = build(result.value)
            self._store_cause(cause, *cache["parts"])

    def _update_rho(self, state: ChainState, rng, adapt_iteration) -> None:
        params = state.params
        grid = self.data.grid
        cache = {}

        def log_target(z):
            rho = rho_from_logit(self.spec, float(z[0]))
            values = grid.progression_loglik(self.prg_terms, rho)
            cache["values"] = values
            return (
                float(values.sum())
                + log_sensitivity_prior(self.spec, rho)
                + rho_log_jacobian(self.spec, float(z[0]))
            )

        z0 = logit_from_rho(self.spec, params.rho)
        current = (
            float(self.prg.sum())
            + log_sensitivity_prior(self.spec, params.rho)
            + rho_log_jacobian(self.spec, z0)
        )
        result = mh_update_block(state.blocks["rho"], np.array([z0]), current, log_target, rng, adapt_iteration)
        if result.accepted:
            state.params = replace(params, rho=rho_from_logit(self.spec, float(result.value[0])))
            self.prg = cache["values"]

    def sweep(self, state: ChainState, rng: np.random.Generator) -> None:
        iteration = state.iteration
        adapt_iteration = iteration if iteration < self.config.n_adapt else None
        params = state.params

        lam = gibbs_update_mixture_weights(self.residual, params.tau_eps, self.priors.kappa, rng)
        tau_eps = gibbs_update_tau_eps(self.residual, lam, self.priors, rng)
        state.params = replace(params, lam=lam, tau_eps=tau_eps)
        self.aug = self.data.per_subject(
            augmented_longitudinal_loglik(
                self.data.obs_y, self.data.obs_y - self.residual, tau_eps, lam
            )
        )

        self._update_beta(state, rng, adapt_iteration)
        self._update_random_effects(state, rng, adapt_iteration)

        omega = gibbs_update_omega(state.params.u, state.params.tau_u, self.priors, rng)
        tau_u = gibbs_update_tau_u(omega, self.priors, rng)
        state.params = replace(state.params, omega=omega, tau_u=tau_u)
        self.re = random_effects_logdensity(state.params.u, omega)

        for cause in CAUSES:
            if self.config.association_block == "joint":
                self._update_cause_block(state, cause, f"association_{cause}", rng, adapt_iteration)
            else:
                self._update_cause_block(state, cause, f"gamma_{cause}", rng, adapt_iteration)
                self._update_cause_block(state, cause, f"alpha_{cause}", rng, adapt_iteration)
            self._update_cause_block(state, cause, f"gamma_h0_{cause}", rng, adapt_iteration)
            tau_h0 = gibbs_update_tau_h0(
                state.params.gamma_h0[cause],
                self.penalties[cause],
                self.rank_terms[cause],
                self.priors,
                rng,
            )
            state.params = replace(state.params, tau_h0={**state.params.tau_h0, cause: tau_h0})

        if self.spec.estimates_rho:
            self._update_rho(state, rng, adapt_iteration)

        state.iteration += 1

    def run(
        self,
        state: ChainState,
        stop_at: Optional[int] = None,
        checkpoint: Optional[Path] = None,
        checkpoint_every: int = 0,
    ) -> ChainState:
        cfg = self.config
        rng = _restore_rng(state.rng_state)
        stop = cfg.n_iterations if stop_at is None else min(stop_at, cfg.n_iterations)
        self._refresh(state.params)
        report_every = max(1, cfg.n_iterations // 10)

        while state.iteration < stop:
            self.sweep(state, rng)
            it = state.iteration
            if it > cfg.n_adapt and (it - cfg.n_adapt) % cfg.thin == 0:
                state.draws.append(flatten_state(state.params).tolist())
                state.draw_iterations.append(it)
                state.u_sum = state.u_sum + state.params.u
            if it % report_every == 0:
                rates = ", ".join(
                    f"{name}={block.acceptance_rate:.2f}" for name, block in state.blocks.items()
                )
                logger.info(f"[chain={state.chain}] iteration {it}/{cfg.n_iterations} acceptance: {rates}")
            if checkpoint is not None and checkpoint_every and it % checkpoint_every == 0:
                state.rng_state = rng.bit_generator.state
                state.save(checkpoint)

        state.rng_state = rng.bit_generator.state
        if checkpoint is not None:
            state.save(checkpoint)
        return state


@dataclass
class PosteriorSamples:
    names: list[str]
    # (n_chains, n_draws, n_parameters)
    draws: np.ndarray
    iterations: np.ndarray
    subject_ids: tuple[str, ...] = ()
    random_effects_mean: Optional[np.ndarray] = None
    acceptance: dict[str, dict[str, float]] = field(default_factory=dict)

    @property
    def n_chains(self) -> int:
        return self.draws.shape[0]

    @property
    def n_draws(self) -> int:
        return self.draws.shape[1]

    def parameter(self, name: str) -> np.ndarray:
        if name not in self.names:
            raise KeyError(f"Unknown parameter {name}")
        return self.draws[:, :, self.names.index(name)]

    def pooled(self, name: str) -> np.ndarray:
        return self.parameter(name).reshape(-1)

    def summary(self) -> pd.DataFrame:
        flat = self.draws.reshape(-1, self.draws.shape[-1])
        quantiles = np.quantile(flat, [0.025, 0.5, 0.975], axis=0)
        return pd.DataFrame(
            {
                "parameter": self.names,
                "mean": flat.mean(axis=0),
                "sd": flat.std(axis=0, ddof=1) if flat.shape[0] > 1 else np.zeros(flat.shape[1]),
                "q2.5": quantiles[0],
                "q50": quantiles[1],
                "q97.5": quantiles[2],
            }
        )

    def to_long_frame(self) -> pd.DataFrame:
        n_chains, n_draws, n_params = self.draws.shape
        return pd.DataFrame(
            {
                "chain": np.repeat(np.arange(1, n_chains + 1), n_draws * n_params),
                "iteration": np.tile(np.repeat(self.iterations, n_params), n_chains),
                "parameter": np.tile(self.names, n_chains * n_draws),
                "value": self.draws.reshape(-1),
            }
        )

    @classmethod
    def from_long_frame(cls, frame: pd.DataFrame) -> "PosteriorSamples":
        names = list(dict.fromkeys(frame["parameter"]))
        chains = sorted(frame["chain"].unique())
        iterations = np.array(sorted(frame["iteration"].unique()))
        wide = frame.pivot_table(index=["chain", "iteration"], columns="parameter", values="value")
        draws = wide[names].to_numpy().reshape(len(chains), iterations.size, len(names))
        return cls(names=names, draws=draws, iterations=iterations)


def _chain_seeds(seed: Optional[int], n_chains: int) -> list[np.random.SeedSequence]:
    return np.random.SeedSequence(seed).spawn(n_chains)


def run_chain(
    spec: ModelSpec,
    data: ModelData,
    sampler_config: SamplerConfig,
    chain: int,
    seed_sequence: Optional[np.random.SeedSequence] = None,
    state: Optional[ChainState] = None,
    stop_at: Optional[int] = None,
    checkpoint: Optional[Path] = None,
    checkpoint_every: int = 0,
) -> ChainState:
    runner = ChainRunner(spec, data, sampler_config)
    with tracer.start_as_current_span("chain", attributes={"chain": chain}):
        if state is None:
            rng = np.random.Generator(np.random.PCG64(seed_sequence))
            state = runner.initialize(chain, rng)
            state.rng_state = rng.bit_generator.state
            logger.info(f"[chain={chain}] initialized")
        else:
            logger.info(f"[chain={chain}] resuming at iteration {state.iteration}")
        return runner.run(state, stop_at=stop_at, checkpoint=checkpoint, checkpoint_every=checkpoint_every)


def collect_samples(spec: ModelSpec, data: ModelData, states: Sequence[ChainState]) -> PosteriorSamples:
    draws = np.asarray([s.draws for s in states], dtype=float)
    n_draws = draws.shape[1]
    random_effects_mean = None
    if n_draws and all(s.u_sum is not None for s in states):
        random_effects_mean = sum(s.u_sum for s in states) / (n_draws * len(states))
    acceptance = {
        f"chain_{s.chain}": {
            **{name: block.acceptance_rate for name, block in s.blocks.items()},
            "random_effects": s.u_accepted / s.u_proposed if s.u_proposed else float("nan"),
        }
        for s in states
    }
    return PosteriorSamples(
        names=parameter_names(spec),
        draws=draws,
        iterations=np.asarray(states[0].draw_iterations),
        subject_ids=data.subject_ids,
        random_effects_mean=random_effects_mean,
        acceptance=acceptance,
    )


class ChainJob(NamedTuple):
    chain: int
    seed_sequence: np.random.SeedSequence
    checkpoint: Optional[Path]
    checkpoint_every: int
    resume: bool


def _run_chain_job(
    spec: ModelSpec,
    data: Union[ModelData, Sequence[PatientRecord]],
    sampler_config: SamplerConfig,
    job: ChainJob,
) -> ChainState:
    if not isinstance(data, ModelData):
        data = prepare_data(spec, data)
    checkpoint = job.checkpoint
    state = ChainState.load(checkpoint) if job.resume and checkpoint and checkpoint.exists() else None
    return run_chain(
        spec,
        data,
        sampler_config,
        job.chain,
        seed_sequence=job.seed_sequence,
        state=state,
        checkpoint=checkpoint,
        checkpoint_every=job.checkpoint_every,
    )


def run_chains(
    spec: ModelSpec,
    data: Union[ModelData, Sequence[PatientRecord]],
    sampler_config: SamplerConfig,
    workers: Optional[int] = None,
    checkpoint_dir: Optional[Path] = None,
    checkpoint_every: int = 0,
    resume: bool = False,
) -> PosteriorSamples:
    """Run independent chains, one process each when workers > 1; output is deterministic given the seed."""
    if not isinstance(data, ModelData):
        data = prepare_data(spec, data)
    seeds = _chain_seeds(sampler_config.seed, sampler_config.n_chains)
    workers = min(workers or settings.WORKERS, sampler_config.n_chains)
    jobs = [
        ChainJob(
            chain=chain,
            seed_sequence=seeds[chain - 1],
            checkpoint=checkpoint_dir / f"chain_{chain}.json" if checkpoint_dir else None,
            checkpoint_every=checkpoint_every,
            resume=resume,
        )
        for chain in range(1, sampler_config.n_chains + 1)
    ]

    if workers > 1:
        # Workers rebuild the prepared data from the records
        level = logging.getLevelName(logging.getLogger("src").getEffectiveLevel())
        with ProcessPoolExecutor(
            max_workers=workers,
            mp_context=mp.get_context("spawn"),
            initializer=setup_logging,
            initargs=(level,),
        ) as pool:
            n = len(jobs)
            states = list(
                pool.map(_run_chain_job, [spec] * n, [data.patients] * n, [sampler_config] * n, jobs)
            )
    else:
        states = [_run_chain_job(spec, data, sampler_config, job) for job in jobs]
    return collect_samples(spec, data, states)
