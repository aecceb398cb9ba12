"""Convergence diagnostics: split R-hat and rank-normalized bulk ESS per parameter."""

import logging
import math
from dataclasses import dataclass, field

import arviz as az
import numpy as np

from src.exceptions import InputError

logger = logging.getLogger(__name__)

RHAT_THRESHOLD = 1.1
# Split R-hat halves every chain; arviz needs at least two draws per half.
MIN_DRAWS = 4


@dataclass(frozen=True)
class ParameterDiagnostics:
    rhat: float
    ess_bulk: float
    degenerate: bool = False
    # Degenerate chains frozen at different values
    stuck: bool = False

    def to_dict(self) -> dict:
        return {
            "rhat": _finite_or_none(self.rhat),
            "ess_bulk": _finite_or_none(self.ess_bulk),
            "degenerate": self.degenerate,
            "stuck": self.stuck,
        }


@dataclass
class DiagnosticsReport:
    parameters: dict[str, ParameterDiagnostics]
    threshold: float = RHAT_THRESHOLD
    not_converged: list[str] = field(default_factory=list)

    @property
    def converged(self) -> bool:
        return not self.not_converged

    def to_dict(self) -> dict:
        return {
            "rhat_threshold": self.threshold,
            "converged": self.converged,
            "not_converged": self.not_converged,
            "parameters": {name: d.to_dict() for name, d in self.parameters.items()},
        }


def _finite_or_none(value: float):
    return float(value) if math.isfinite(value) else None


def _as_chains(values) -> np.ndarray:
    chains = np.atleast_2d(np.asarray(values, dtype=float))
    if chains.ndim != 2:
        raise InputError(f"Expected draws shaped (chains, draws), got {chains.shape}")
    if chains.shape[1] < MIN_DRAWS:
        raise InputError(
            f"Split diagnostics need at least {MIN_DRAWS} draws per chain, got {chains.shape[1]}"
        )
    if not np.all(np.isfinite(chains)):
        raise InputError("Draws contain non-finite values")
    return chains


def _split_halves_constant(chains: np.ndarray) -> bool:
    half = chains.shape[1] // 2
    halves = np.concatenate([chains[:, :half], chains[:, -half:]], axis=0)
    return bool(np.all(np.ptp(halves, axis=1) == 0))


def split_rhat(values) -> tuple[float, bool]:
    """Split R-hat of draws shaped (chains, draws); returns (rhat, degenerate).

    Split chains without within-chain variance are degenerate and reported
    with R-hat 1; `diagnostics` keeps them out of convergence when their
    values differ.
    """
    chains = _as_chains(values)
    if _split_halves_constant(chains):
        return 1.0, True
    return float(az.rhat(chains, method="split")), False


def ess_bulk(values) -> float:
    """Rank-normalized bulk effective sample size."""
    chains = _as_chains(values)
    # Undefined without within-chain variance
    if _split_halves_constant(chains):
        return math.nan
    return float(az.ess(chains, method="bulk"))


def is_convergence_parameter(name: str) -> bool:
    """Association, covariate and fixed-effect coefficients gate convergence."""
    return name.startswith(("beta_", "alpha_")) or name in ("gamma_prg", "gamma_trt")


def diagnostics(samples, threshold: float = RHAT_THRESHOLD) -> DiagnosticsReport:
    """Split R-hat and bulk ESS for every parameter of a PosteriorSamples."""
    report = {}
    for index, name in enumerate(samples.names):
        chains = samples.draws[:, :, index]
        rhat, degenerate = split_rhat(chains)
        report[name] = ParameterDiagnostics(
            rhat=rhat,
            ess_bulk=ess_bulk(chains),
            degenerate=degenerate,
            stuck=degenerate and bool(np.ptp(chains) > 0),
        )

    not_converged = [
        name
        for name, d in report.items()
        if is_convergence_parameter(name) and (d.stuck or not d.rhat < threshold)
    ]
    if not_converged:
        logger.warning(
            f"R-hat not below {threshold} or chains stuck for {len(not_converged)} parameter(s): "
            f"{', '.join(not_converged)}"
        )
    return DiagnosticsReport(parameters=report, threshold=threshold, not_converged=not_converged)
