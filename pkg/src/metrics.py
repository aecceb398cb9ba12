"""Cumulative incidence estimation and simulation-study evaluation metrics."""

import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np
import pandas as pd

from src.exceptions import InputError, SchemaError
from src.model_core import (
    CAUSES,
    N_FIXED_EFFECTS,
    BetaSensitivity,
    FixedSensitivity,
    ModelSpec,
    UniformSensitivity,
    log_baseline_hazard,
    population_trajectory,
)
from src.sampler import PosteriorSamples
from src.simulator import SimTruth
from src.spline import bspline_design

logger = logging.getLogger(__name__)

BASELINE_GRID = np.round(np.arange(0.5, 10.0 + 1e-9, 0.1), 10)
TRAJECTORY_YEARS = (2.0, 4.0, 6.0)
CREDIBLE_LEVELS = (0.025, 0.975)

# Sensitivity settings compared in the simulation study
STUDY_SCENARIOS = {
    "fixed_0.6": FixedSensitivity(rho=0.6),
    "fixed_0.75": FixedSensitivity(rho=0.75),
    "fixed_1.0": FixedSensitivity(rho=1.0),
    "uniform_0.6_0.9": UniformSensitivity(lo=0.6, hi=0.9),
    "uniform_0.5_0.8": UniformSensitivity(lo=0.5, hi=0.8),
}
# Intervals of the other models are compared against this one
REFERENCE_SCENARIO = "fixed_0.75"


def scenario_name(mode) -> str:
    if isinstance(mode, FixedSensitivity):
        return f"fixed_{mode.rho:g}" if mode.rho != 1.0 else "fixed_1.0"
    if isinstance(mode, UniformSensitivity):
        return f"uniform_{mode.lo:g}_{mode.hi:g}"
    if isinstance(mode, BetaSensitivity):
        return f"beta_{mode.a:g}_{mode.b:g}"
    raise InputError(f"Unknown sensitivity mode {mode!r}")


@dataclass(frozen=True)
class CifCurve:
    cause: str
    times: np.ndarray
    values: np.ndarray
    at_risk: np.ndarray

    def at(self, t) -> np.ndarray:
        """Right-continuous step evaluation; 0 before the first time."""
        index = np.searchsorted(self.times, np.asarray(t, dtype=float), side="right") - 1
        return np.where(index >= 0, self.values[np.maximum(index, 0)], 0.0)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {"cause": self.cause, "time": self.times, "cif": self.values, "at_risk": self.at_risk}
        )


def aalen_johansen(times, causes) -> dict[str, CifCurve]:
    """Cumulative incidence of progression (cause 1) and treatment (cause 2).

    Cause 0 is right-censoring. Censorings at an event time stay in that
    time's risk set.
    """
    t = np.asarray(times, dtype=float)
    c = np.asarray(causes, dtype=int)
    if t.size == 0:
        raise InputError("Aalen-Johansen estimation needs at least one observation")
    if t.shape != c.shape:
        raise InputError(f"times and causes differ in shape: {t.shape} vs {c.shape}")
    if not np.all(np.isfinite(t)) or np.any(t < 0):
        raise InputError("Event times must be finite and non-negative")
    if not np.all(np.isin(c, (0, 1, 2))):
        raise InputError("Causes must be 0 (censored), 1 (progression) or 2 (treatment)")

    unique, inverse = np.unique(t, return_inverse=True)
    counts = np.bincount(inverse, minlength=unique.size)
    d1 = np.bincount(inverse, weights=(c == 1), minlength=unique.size)
    d2 = np.bincount(inverse, weights=(c == 2), minlength=unique.size)
    at_risk = t.size - np.r_[0, np.cumsum(counts)[:-1]]

    survival = np.cumprod(1.0 - (d1 + d2) / at_risk)
    survival_before = np.r_[1.0, survival[:-1]]
    cif1 = np.cumsum(survival_before * d1 / at_risk)
    cif2 = np.cumsum(survival_before * d2 / at_risk)
    return {
        "prg": CifCurve("prg", unique, cif1, at_risk),
        "trt": CifCurve("trt", unique, cif2, at_risk),
    }


def observed_outcomes(patients) -> tuple[np.ndarray, np.ndarray]:
    """(terminal time, delta) per subject; detections count at the detecting biopsy."""
    return (
        np.array([p.terminal_time for p in patients], dtype=float),
        np.array([p.delta for p in patients], dtype=int),
    )


class Bias(NamedTuple):
    value: float
    # True when the truth is zero and the value is an absolute difference
    absolute: bool


def relative_bias(estimate: float, truth: float) -> Bias:
    if truth == 0:
        return Bias(float(estimate - truth), True)
    return Bias(float((estimate - truth) / truth), False)


@dataclass(frozen=True)
class IntervalMetrics:
    width: float
    coverage: float
    mse: float
    mean_bias: float
    bias_absolute: bool
    n_replicates: int

    def to_dict(self) -> dict:
        return {
            "relative_bias": self.mean_bias,
            "bias_absolute": self.bias_absolute,
            "ci_width": self.width,
            "coverage": self.coverage,
            "mse": self.mse,
            "n_replicates": self.n_replicates,
        }


def interval_metrics_from_summaries(lower, upper, means, truth: float) -> IntervalMetrics:
    lower, upper, means = (np.asarray(x, dtype=float) for x in (lower, upper, means))
    if lower.size == 0:
        raise InputError("Interval metrics need at least one replicate")
    if lower.size < 2:
        logger.warning("Coverage and MSE from a single replicate are indicators, not rates")
    biases = [relative_bias(m, truth) for m in means]
    return IntervalMetrics(
        width=float(np.mean(upper - lower)),
        coverage=float(np.mean((lower <= truth) & (truth <= upper))),
        mse=float(np.mean((means - truth) ** 2)),
        mean_bias=float(np.mean([b.value for b in biases])),
        bias_absolute=biases[0].absolute,
        n_replicates=int(lower.size),
    )


def interval_metrics(replicate_draws: Sequence[np.ndarray], truth: float) -> IntervalMetrics:
    """95% interval width, coverage and MSE of posterior means across replicates."""
    lower, upper, means = [], [], []
    for draws in replicate_draws:
        draws = np.asarray(draws, dtype=float).reshape(-1)
        lo, hi = np.quantile(draws, CREDIBLE_LEVELS)
        lower.append(lo)
        upper.append(hi)
        means.append(draws.mean())
    return interval_metrics_from_summaries(lower, upper, means, truth)


def relative_width_change(widths_model, widths_reference) -> float:
    """Average percentage by which the model's intervals are wider (>0) or narrower (<0)."""
    model = np.asarray(widths_model, dtype=float)
    reference = np.asarray(widths_reference, dtype=float)
    if model.shape != reference.shape or model.size == 0:
        raise InputError("Width comparison needs two non-empty arrays of equal shape")
    if np.any(reference <= 0):
        raise InputError("Reference widths must be positive")
    return float(100.0 * np.mean(model / reference - 1.0))


def truth_values(truth: SimTruth) -> dict[str, float]:
    """Posterior parameter names mapped to their true values."""
    values = {f"beta_{i}": float(b) for i, b in enumerate(truth.beta)}
    for cause in CAUSES:
        values[f"gamma_{cause}"] = float(truth.gamma[cause])
        for a, alpha in enumerate(truth.alpha[cause], start=1):
            values[f"alpha_{cause}_{a}"] = float(alpha)
        for a, g in enumerate(truth.gamma_h0[cause], start=1):
            values[f"gamma_h0_{cause}_{a}"] = float(g)
    values["tau_eps"] = truth.tau_eps
    values["sigma"] = 1.0 / math.sqrt(truth.tau_eps)
    omega = truth.omega_matrix
    for i in range(omega.shape[0]):
        for j in range(i, omega.shape[0]):
            values[f"omega_{i + 1}_{j + 1}"] = float(omega[i, j])
    values["rho"] = truth.rho_true
    return values


def _required_names() -> list[str]:
    names = [f"beta_{i}" for i in range(N_FIXED_EFFECTS)]
    for cause in CAUSES:
        names += [f"gamma_{cause}", f"alpha_{cause}_1", f"alpha_{cause}_2"]
    return names


def comparable_parameters(spec: ModelSpec, samples: PosteriorSamples, truth: SimTruth) -> list[str]:
    """Parameters compared directly with the truth; raises SchemaError on shape mismatch."""
    missing = [n for n in _required_names() if n not in samples.names]
    if missing:
        raise SchemaError(f"Posterior lacks parameters {missing}")
    names = list(_required_names())
    names += ["tau_eps", "sigma"]
    names += [n for n in samples.names if n.startswith("omega_")]
    truth_spec = truth.model_spec()
    for cause in CAUSES:
        # Coefficients are only comparable in the basis the truth uses.
        if spec.basis(cause) == truth_spec.basis(cause):
            names += [n for n in samples.names if n.startswith(f"gamma_h0_{cause}_")]
    if spec.estimates_rho:
        names.append("rho")
    return [n for n in names if n in samples.names]


def _gamma_h0_draws(spec: ModelSpec, samples: PosteriorSamples, cause: str) -> np.ndarray:
    n_basis = spec.basis(cause).n_basis
    columns = [samples.names.index(f"gamma_h0_{cause}_{a}") for a in range(1, n_basis + 1)]
    return samples.draws[:, :, columns].reshape(-1, n_basis)


def log_baseline_draws(spec: ModelSpec, samples: PosteriorSamples, cause: str, grid=BASELINE_GRID):
    """Posterior draws of log h0(t) on the grid, shaped (draws, grid)."""
    return _gamma_h0_draws(spec, samples, cause) @ bspline_design(spec.basis(cause), grid).T


def trajectory_draws(spec: ModelSpec, samples: PosteriorSamples, times, age: float) -> np.ndarray:
    columns = [samples.names.index(f"beta_{i}") for i in range(N_FIXED_EFFECTS)]
    betas = samples.draws[:, :, columns].reshape(-1, N_FIXED_EFFECTS)
    return np.stack([population_trajectory(spec, b, age, times) for b in betas])


def _interval_summary(draws: np.ndarray) -> dict:
    lo, median, hi = np.quantile(draws, [CREDIBLE_LEVELS[0], 0.5, CREDIBLE_LEVELS[1]], axis=0)
    return {"mean": draws.mean(axis=0), "q2.5": lo, "q50": median, "q97.5": hi}


def derived_summary(spec: ModelSpec, samples: PosteriorSamples, age: Optional[float] = None) -> dict:
    """Hazard ratios, log baseline hazard curves and the population PSA trajectory."""
    age = spec.age_center if age is None else age
    ratios = {}
    for cause in CAUSES:
        for name in (f"gamma_{cause}", f"alpha_{cause}_1", f"alpha_{cause}_2"):
            s = _interval_summary(np.exp(samples.pooled(name)))
            ratios[f"exp_{name}"] = {k: float(v) for k, v in s.items()}

    baseline = {}
    for cause in CAUSES:
        s = _interval_summary(log_baseline_draws(spec, samples, cause))
        baseline[cause] = {"time": BASELINE_GRID.tolist(), **{k: v.tolist() for k, v in s.items()}}

    years = np.asarray(TRAJECTORY_YEARS)
    s = _interval_summary(trajectory_draws(spec, samples, years, age))
    trajectory = {
        "age": age,
        "time": years.tolist(),
        **{k: v.tolist() for k, v in s.items()},
        "ci_width": (s["q97.5"] - s["q2.5"]).tolist(),
    }
    return {"hazard_ratios": ratios, "log_baseline_hazard": baseline, "population_trajectory": trajectory}


def trajectory_metrics(
    spec: ModelSpec, samples: PosteriorSamples, truth: SimTruth, years=TRAJECTORY_YEARS
) -> pd.DataFrame:
    """Bias and 95% width of the population PSA trajectory at the given years."""
    years = np.asarray(years, dtype=float)
    true_curve = population_trajectory(truth.model_spec(), truth.beta, truth.age_center, years)
    s = _interval_summary(trajectory_draws(spec, samples, years, truth.age_center))
    return pd.DataFrame(
        {
            "time": years,
            "truth": true_curve,
            "estimate": s["mean"],
            "relative_bias": (s["mean"] - true_curve) / true_curve,
            "ci_width": s["q97.5"] - s["q2.5"],
        }
    )


def baseline_hazard_metrics(
    spec: ModelSpec, samples: PosteriorSamples, truth: SimTruth, cause: str, grid=BASELINE_GRID
) -> pd.DataFrame:
    """Relative bias and 95% width of log h0 on the evaluation grid."""
    truth_spec = truth.model_spec()
    true_curve = log_baseline_hazard(truth_spec, truth.gamma_h0[cause], cause, grid)
    s = _interval_summary(log_baseline_draws(spec, samples, cause, grid))
    return pd.DataFrame(
        {
            "cause": cause,
            "time": grid,
            "truth": true_curve,
            "estimate": s["mean"],
            "relative_bias": (s["mean"] - true_curve) / true_curve,
            "ci_width": s["q97.5"] - s["q2.5"],
        }
    )


@dataclass
class Replicate:
    name: str
    model: str
    spec: ModelSpec
    samples: PosteriorSamples
    converged: bool = True


@dataclass
class EvaluationReport:
    parameters: dict[str, dict[str, IntervalMetrics]]
    baseline: pd.DataFrame
    trajectory: pd.DataFrame
    excluded: list[str] = field(default_factory=list)
    n_replicates: dict[str, int] = field(default_factory=dict)

    def table(self, metric: str) -> pd.DataFrame:
        """Parameters x models layout of one metric."""
        rows = {
            model: {name: getattr(m, metric) for name, m in metrics.items()}
            for model, metrics in self.parameters.items()
        }
        return pd.DataFrame(rows)

    def width_changes(self, reference: str = REFERENCE_SCENARIO) -> dict[str, float]:
        """Average interval width change (%) of each model against `reference` over shared parameters."""
        if reference not in self.parameters:
            return {}
        reference_metrics = self.parameters[reference]
        changes = {}
        for model, metrics in self.parameters.items():
            if model == reference:
                continue
            names = sorted(
                name for name in metrics if name in reference_metrics and reference_metrics[name].width > 0
            )
            if not names:
                logger.warning(f"[model={model}] no parameters shared with {reference}; width change skipped")
                continue
            changes[model] = relative_width_change(
                [metrics[name].width for name in names],
                [reference_metrics[name].width for name in names],
            )
        return changes

    def baseline_summary(self) -> pd.DataFrame:
        """Grid-averaged relative bias, width and mean log h0 per model and cause."""
        if self.baseline.empty:
            return pd.DataFrame()
        return (
            self.baseline.groupby(["model", "cause"])
            .agg(
                relative_bias=("relative_bias", "mean"),
                ci_width=("ci_width", "mean"),
                mean_log_baseline=("estimate", "mean"),
            )
            .reset_index()
        )

    def to_dict(self) -> dict:
        return {
            "parameters": {
                model: {name: m.to_dict() for name, m in metrics.items()}
                for model, metrics in self.parameters.items()
            },
            "baseline_hazard": self.baseline_summary().to_dict(orient="records"),
            "width_change": {"reference": REFERENCE_SCENARIO, "percent": self.width_changes()},
            "excluded": self.excluded,
            "n_replicates": self.n_replicates,
        }


def evaluate_replicates(replicates: Sequence[Replicate], truth: SimTruth) -> EvaluationReport:
    """Bias, width, coverage and MSE per model across replicates."""
    if not replicates:
        raise InputError("Evaluation needs at least one posterior")
    truth_map = truth_values(truth)
    by_model: dict[str, list[Replicate]] = defaultdict(list)
    excluded = []
    for replicate in replicates:
        if not replicate.converged:
            logger.warning(f"[replicate={replicate.name}] excluded: chains did not converge")
            excluded.append(replicate.name)
            continue
        by_model[replicate.model].append(replicate)

    parameters, baseline_frames, trajectory_frames = {}, [], []
    for model, group in sorted(by_model.items()):
        summaries: dict[str, list[tuple[float, float, float]]] = defaultdict(list)
        for replicate in group:
            names = comparable_parameters(replicate.spec, replicate.samples, truth)
            for name in names:
                draws = replicate.samples.pooled(name)
                lo, hi = np.quantile(draws, CREDIBLE_LEVELS)
                summaries[name].append((lo, hi, draws.mean()))
            for cause in CAUSES:
                frame = baseline_hazard_metrics(replicate.spec, replicate.samples, truth, cause)
                baseline_frames.append(frame.assign(model=model, replicate=replicate.name))
            frame = trajectory_metrics(replicate.spec, replicate.samples, truth)
            trajectory_frames.append(frame.assign(model=model, replicate=replicate.name))

        parameters[model] = {
            name: interval_metrics_from_summaries(*zip(*rows), truth_map[name])
            for name, rows in summaries.items()
        }

    return EvaluationReport(
        parameters=parameters,
        baseline=pd.concat(baseline_frames, ignore_index=True) if baseline_frames else pd.DataFrame(),
        trajectory=pd.concat(trajectory_frames, ignore_index=True) if trajectory_frames else pd.DataFrame(),
        excluded=excluded,
        n_replicates={model: len(group) for model, group in by_model.items()},
    )
