"""Pipelines behind the command-line subcommands.

Each function takes a resolved RunConfig plus paths, writes its outputs and
returns a small result dict for the caller to print.
"""

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import pandas as pd
import pendulum
from opentelemetry import trace

from src.dataset_loader import load_dataset, load_latent
from src.diagnostics import diagnostics
from src.exceptions import ConfigurationError, InputError
from src.likelihood import log_posterior_parts, prepare_data, subject_breakdown
from src.metrics import (
    STUDY_SCENARIOS,
    Replicate,
    aalen_johansen,
    derived_summary,
    evaluate_replicates,
    observed_outcomes,
    scenario_name,
)
from src.model_core import ParameterState, format_sensitivity
from src.run_config import RunConfig, apply_overrides, load_run_config
from src.sampler import run_chains
from src.settings import FORMAT_VERSION
from src.settings import config as settings
from src.simulator import resolve_dropout, simulate_dataset
from src.writers import (
    dataset_fingerprint,
    read_posterior,
    write_config_echo,
    write_dataset,
    write_json,
    write_posterior,
)

logger = logging.getLogger(__name__)
tracer = trace.get_tracer(__name__)

REPORT_METRICS = ("coverage", "mean_bias", "width", "mse")


def _map(fn, items: Sequence, workers: Optional[int]) -> list:
    """Ordered map, threaded when more than one worker is allowed."""
    workers = min(workers or settings.WORKERS, max(1, len(items)))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, items))
    return [fn(item) for item in items]


def _require_seed(seed: Optional[int], command: str) -> int:
    if seed is None:
        raise ConfigurationError(f"{command} needs a seed (--seed or sampler.seed)")
    return seed


def dataset_seeds(seed: int, n_datasets: int) -> list[int]:
    return [int(s.generate_state(1, dtype=np.uint64)[0]) for s in np.random.SeedSequence(seed).spawn(n_datasets)]


def simulate(run_config: RunConfig, out: Path, workers: Optional[int] = None) -> dict:
    """Write one dataset directory, or numbered subdirectories for several datasets."""
    seed = _require_seed(run_config.sampler.seed, "simulate")
    n_datasets = run_config.simulate.n_datasets
    truth = resolve_dropout(run_config.simulate.truth)
    # The echo carries the calibrated dropout rate so the truth file reproduces the data
    resolved = run_config.model_copy(
        update={"simulate": run_config.simulate.model_copy(update={"truth": truth})}
    )
    out = Path(out)
    seeds = dataset_seeds(seed, n_datasets) if n_datasets > 1 else [seed]

    def run_one(index: int) -> dict:
        directory = out if n_datasets == 1 else out / f"dataset_{index + 1:03d}"
        with tracer.start_as_current_span("dataset", attributes={"dataset": index + 1}):
            dataset = simulate_dataset(truth, seeds[index])
            write_dataset(directory, dataset.patients, dataset.latent)
        logger.info(f"[dataset={index + 1:03d}] written to {directory}")
        return {"directory": str(directory), "seed": seeds[index], **dataset.event_proportions()}

    started_at = pendulum.now("UTC")
    results = _map(run_one, list(range(n_datasets)), workers)
    write_config_echo(out, resolved, extra={"datasets": results})
    elapsed = (pendulum.now("UTC") - started_at).in_words()
    logger.info(f"Simulated {n_datasets} dataset(s) into {out} in {elapsed}")
    return {"datasets": results, "dropout_rate": truth.dropout_rate}


def fit(
    run_config: RunConfig,
    data_dir: Path,
    out: Path,
    workers: Optional[int] = None,
    resume: bool = False,
) -> dict:
    _require_seed(run_config.sampler.seed, "fit")
    data_dir, out = Path(data_dir), Path(out)
    patients = load_dataset(data_dir)
    spec = run_config.model.build_spec(patients)
    name = scenario_name(spec.sensitivity)
    logger.info(f"[fit={name}] {len(patients)} subjects from {data_dir}")
    checkpoint_every = run_config.sampler.thin * settings.CHECKPOINT_EVERY_DRAWS
    if run_config.paths.checkpoints is None:
        checkpoint_every = 0
    started_at = pendulum.now("UTC")

    with tracer.start_as_current_span("fit", attributes={"scenario": name}):
        samples = run_chains(
            spec,
            prepare_data(spec, patients),
            run_config.sampler,
            workers=workers,
            checkpoint_dir=run_config.paths.checkpoints,
            checkpoint_every=checkpoint_every,
            resume=resume,
        )
    report = diagnostics(samples)
    write_posterior(
        out,
        spec,
        samples,
        report,
        derived_summary(spec, samples),
        save_random_effects=run_config.sampler.save_random_effects,
    )
    write_config_echo(
        out,
        run_config,
        extra={"dataset": str(data_dir), "dataset_fingerprint": dataset_fingerprint(data_dir)},
    )
    elapsed = (pendulum.now("UTC") - started_at).in_words()
    logger.info(f"[fit={name}] finished in {elapsed}; converged={report.converged}")
    return {"posterior": str(out), "scenario": name, "converged": report.converged}


def load_parameters(path: Path) -> ParameterState:
    """A ParameterState JSON, or a chain checkpoint holding one under 'params'."""
    path = Path(path)
    if not path.exists():
        raise InputError(f"Parameter file not found: {path}")
    try:
        payload = json.loads(path.read_text())
        params = ParameterState.from_dict(payload.get("params", payload))
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise InputError(f"Unreadable parameter file {path}: {e}") from e
    params.validate()
    return params


def loglik(run_config: RunConfig, data_dir: Path, params_path: Path, out: Optional[Path] = None) -> dict:
    """Log posterior and per-subject survival factors for one parameter state."""
    patients = load_dataset(Path(data_dir))
    spec = run_config.model.build_spec(patients)
    params = load_parameters(params_path)
    parts = log_posterior_parts(spec, params, patients)
    subjects = []
    for i, patient in enumerate(patients):
        breakdown = subject_breakdown(spec, params, patient).to_dict()
        breakdown.update(
            longitudinal=parts.longitudinal[i],
            survival=parts.survival[i],
            random_effects=parts.random_effects[i],
        )
        subjects.append(breakdown)
    result = {
        "format_version": FORMAT_VERSION,
        "sensitivity": format_sensitivity(spec.sensitivity),
        "log_posterior": parts.total,
        "log_prior": parts.prior,
        "subjects": subjects,
    }
    if out is not None:
        write_json(Path(out), result)
    return result


def _load_replicate(directory: Path) -> Replicate:
    spec, samples, converged = read_posterior(directory)
    return Replicate(
        name=str(directory),
        model=scenario_name(spec.sensitivity),
        spec=spec,
        samples=samples,
        converged=converged,
    )


def evaluate(truth_path: Path, posteriors: Sequence[Path], out: Path, workers: Optional[int] = None) -> dict:
    """Bias, width, coverage and MSE tables across posterior directories."""
    if not posteriors:
        raise InputError("evaluate needs at least one posterior directory")
    truth = load_run_config(Path(truth_path)).simulate.truth
    replicates = _map(_load_replicate, [Path(p) for p in posteriors], workers)
    with tracer.start_as_current_span("evaluate", attributes={"replicates": len(replicates)}):
        report = evaluate_replicates(replicates, truth)

    out = Path(out)
    write_json(out / "report.json", {"format_version": FORMAT_VERSION, **report.to_dict()})
    for metric in REPORT_METRICS:
        report.table(metric).to_csv(out / f"{metric}.csv", index_label="parameter")
    report.baseline.to_csv(out / "baseline_hazard.csv", index=False)
    report.trajectory.to_csv(out / "trajectory.csv", index=False)
    logger.info(f"Evaluated {len(replicates) - len(report.excluded)} replicate(s); report in {out}")
    return {"report": str(out / "report.json"), "excluded": report.excluded}


def cumulative_incidence(data_dir: Path, out: Path) -> dict:
    patients = load_dataset(Path(data_dir))
    times, causes = observed_outcomes(patients)
    curves = aalen_johansen(times, causes)
    frame = pd.concat([curve.to_frame() for curve in curves.values()], ignore_index=True)
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(out, index=False)
    return {"cif": str(out), "final": {cause: float(c.values[-1]) for cause, c in curves.items()}}


def validate(data_dir: Path) -> dict:
    """Row-level checks of a dataset directory, with the simulation truth cross-checked when present."""
    patients = load_dataset(Path(data_dir))
    counts = {f"delta_{d}": sum(p.delta == d for p in patients) for d in (0, 1, 2)}
    summary = {
        "subjects": len(patients),
        "measurements": sum(len(p.measurements) for p in patients),
        **counts,
    }
    latent = load_latent(Path(data_dir), patients)
    if latent is not None:
        terminal = {p.id: p.terminal_time for p in patients}
        delta = {p.id: p.delta for p in patients}
        progressed = [row for row in latent if row.progression_time <= terminal[row.subject_id]]
        summary["latent"] = {
            "subjects": len(latent),
            "progressed": len(progressed),
            "missed_progressions": sum(delta[row.subject_id] != 1 for row in progressed),
        }
    return summary


def compare(
    run_config: RunConfig,
    data_dirs: Sequence[Path],
    out: Path,
    scenarios: Optional[Sequence[str]] = None,
    workers: Optional[int] = None,
) -> list[dict]:
    """Fit every study scenario on every dataset: out/<dataset>/<scenario>/."""
    scenarios = list(scenarios or STUDY_SCENARIOS)
    unknown = [s for s in scenarios if s not in STUDY_SCENARIOS]
    if unknown:
        raise ConfigurationError(f"Unknown scenario(s) {unknown}; choose from {sorted(STUDY_SCENARIOS)}")

    results = []
    for data_dir in map(Path, data_dirs):
        for scenario in scenarios:
            scenario_config = apply_overrides(
                run_config, {"model.sensitivity": format_sensitivity(STUDY_SCENARIOS[scenario])}
            )
            logger.info(f"[dataset={data_dir.name}] fitting scenario {scenario}")
            results.append(fit(scenario_config, data_dir, Path(out) / data_dir.name / scenario, workers=workers))
    return results
