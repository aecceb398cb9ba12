"""Dataset CSVs, posterior directories and config echoes."""

import json
import logging
from pathlib import Path
from typing import Any, Optional, Sequence

import pandas as pd

from src.diagnostics import DiagnosticsReport
from src.exceptions import InputError, SchemaError
from src.model_core import ModelSpec, PatientRecord
from src.run_config import RunConfig
from src.sampler import PosteriorSamples
from src.settings import FORMAT_VERSION
from src.simulator import SubjectTruth
from src.sources.dataset import BIOPSY_SEPARATOR
from src.utils import create_fingerprint, to_jsonable

logger = logging.getLogger(__name__)

SUBJECTS_FILE = "subjects.csv"
LONGITUDINAL_FILE = "longitudinal.csv"
LATENT_FILE = "latent.csv"
SAMPLES_FILE = "samples.csv"
SUMMARY_FILE = "summary.json"
DIAGNOSTICS_FILE = "diagnostics.json"
RANDOM_EFFECTS_FILE = "random_effects.csv"
CONFIG_ECHO_FILE = "config_echo.json"


def write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(to_jsonable(payload), indent=2, allow_nan=False) + "\n")


def read_json(path: Path) -> dict:
    if not path.exists():
        raise InputError(f"Missing file {path}")
    return json.loads(path.read_text())


def write_dataset(
    directory: Path,
    patients: Sequence[PatientRecord],
    latent: Optional[Sequence[SubjectTruth]] = None,
) -> list[Path]:
    """subjects.csv and longitudinal.csv (plus latent.csv for simulated data)."""
    directory.mkdir(parents=True, exist_ok=True)
    subjects = pd.DataFrame(
        {
            "subject_id": [p.id for p in patients],
            "age": [p.age for p in patients],
            "psad": [p.psad for p in patients],
            "delta": [p.delta for p in patients],
            "terminal_time": [p.terminal_time for p in patients],
            "biopsy_times": [BIOPSY_SEPARATOR.join(repr(t) for t in p.biopsy_times) for p in patients],
        }
    )
    longitudinal = pd.DataFrame(
        [(p.id, t, y) for p in patients for t, y in p.measurements],
        columns=["subject_id", "time", "log2_psa"],
    )
    paths = [directory / SUBJECTS_FILE, directory / LONGITUDINAL_FILE]
    subjects.to_csv(paths[0], index=False)
    longitudinal.to_csv(paths[1], index=False)
    if latent is not None:
        paths.append(directory / LATENT_FILE)
        pd.DataFrame([s.to_row() for s in latent]).to_csv(paths[2], index=False)
    logger.info(f"Wrote {len(patients)} subjects to {directory}")
    return paths


def dataset_fingerprint(directory: Path) -> str:
    return create_fingerprint([directory / SUBJECTS_FILE, directory / LONGITUDINAL_FILE])


def write_config_echo(
    directory: Path,
    run_config: RunConfig,
    extra: Optional[dict[str, Any]] = None,
) -> Path:
    """Resolved run configuration plus provenance; enough to rerun exactly.

    Holds no wall-clock time so reruns with the same seed stay byte-identical.
    """
    payload = {
        "format_version": FORMAT_VERSION,
        "run_config": run_config.model_dump(mode="json"),
        **(extra or {}),
    }
    path = directory / CONFIG_ECHO_FILE
    write_json(path, payload)
    return path


def write_posterior(
    directory: Path,
    spec: ModelSpec,
    samples: PosteriorSamples,
    report: DiagnosticsReport,
    derived: dict,
    save_random_effects: bool = False,
) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    samples.to_long_frame().to_csv(directory / SAMPLES_FILE, index=False)

    summary = samples.summary()
    write_json(
        directory / SUMMARY_FILE,
        {
            "format_version": FORMAT_VERSION,
            "model_spec": spec.model_dump(mode="json"),
            "n_chains": samples.n_chains,
            "n_draws": samples.n_draws,
            "parameters": summary.set_index("parameter").to_dict(orient="index"),
            "acceptance": samples.acceptance,
            **derived,
        },
    )
    write_json(directory / DIAGNOSTICS_FILE, {"format_version": FORMAT_VERSION, **report.to_dict()})

    if save_random_effects and samples.random_effects_mean is not None:
        frame = pd.DataFrame(samples.random_effects_mean, columns=["u0", "u1", "u2", "u3"])
        frame.insert(0, "subject_id", list(samples.subject_ids))
        frame.to_csv(directory / RANDOM_EFFECTS_FILE, index=False)
    logger.info(f"Wrote posterior ({samples.n_chains} chains x {samples.n_draws} draws) to {directory}")


def read_posterior(directory: Path) -> tuple[ModelSpec, PosteriorSamples, bool]:
    """(spec, samples, converged) from a posterior directory."""
    directory = Path(directory)
    summary = read_json(directory / SUMMARY_FILE)
    diagnostics = read_json(directory / DIAGNOSTICS_FILE)
    for payload, name in ((summary, SUMMARY_FILE), (diagnostics, DIAGNOSTICS_FILE)):
        if payload.get("format_version") != FORMAT_VERSION:
            raise SchemaError(
                f"{directory / name} has format_version {payload.get('format_version')}, "
                f"expected {FORMAT_VERSION}"
            )
    samples_path = directory / SAMPLES_FILE
    if not samples_path.exists():
        raise InputError(f"Missing file {samples_path}")
    try:
        spec = ModelSpec.model_validate(summary["model_spec"])
        samples = PosteriorSamples.from_long_frame(pd.read_csv(samples_path))
    except (KeyError, ValueError) as e:
        raise SchemaError(f"Unreadable posterior in {directory}: {e}") from e
    return spec, samples, bool(diagnostics.get("converged", True))
