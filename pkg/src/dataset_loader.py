"""Load a dataset directory (subjects.csv + longitudinal.csv) into PatientRecords."""

import logging
from collections import defaultdict
from pathlib import Path
from typing import Optional

from pydantic import TypeAdapter, ValidationError

from src.exceptions import DataValidationError, InputError
from src.model_core import TIME_TOLERANCE, PatientRecord
from src.readers.reader_factory import ReaderFactory
from src.sources.base import DataSource, TableModel
from src.sources.dataset import LatentRow, MeasurementRow, SubjectRow
from src.sources.registry import DATASET_SOURCES, SourceRegistry
from src.utils import (
    create_field_mapping,
    create_reverse_field_mapping,
    extract_validation_error_message,
)

logger = logging.getLogger(__name__)

MAX_REPORTED_ERRORS = 50


def find_dataset_files(
    directory: Path, registry: SourceRegistry = DATASET_SOURCES
) -> dict[str, Path]:
    """Map each registered table to its file in the directory."""
    if not directory.exists() or not directory.is_dir():
        raise InputError(f"Dataset directory not found: {directory}")
    found: dict[str, Path] = {}
    for path in sorted(directory.iterdir()):
        if path.name.startswith(".") or not path.is_file():
            continue
        if not ReaderFactory.is_supported(path):
            continue
        source = registry.find_source_for_file(str(path))
        if source is None:
            logger.debug(f"Skipping unregistered file {path.name}")
            continue
        if source.table_name in found:
            raise InputError(
                f"Two files for table {source.table_name}: {found[source.table_name].name}, {path.name}"
            )
        found[source.table_name] = path

    missing = [s.table_name for s in registry.sources if not s.optional and s.table_name not in found]
    if missing:
        raise InputError(f"Dataset directory {directory} lacks files for {missing}")
    return found


def _row_error(file_path: Path, line: int, errors: list[dict]) -> dict:
    return {"file": file_path.name, "file_row_number": line, "errors": errors}


def read_rows(
    file_path: Path, source: DataSource, row_errors: list[dict]
) -> list[tuple[int, TableModel]]:
    """Validated rows with their file line numbers; failures and grain repeats go to row_errors."""
    reader = ReaderFactory.create_reader(file_path, source)
    field_mapping = create_field_mapping(reader)
    reverse_field_mapping = create_reverse_field_mapping(reader)
    adapter = TypeAdapter(source.source_model)

    rows = []
    first_seen: dict[tuple, int] = {}
    for index, record in enumerate(reader, start=reader.starting_row_number):
        record = {
            field_mapping[k.lower()]: v for k, v in record.items() if k.lower() in field_mapping
        }
        try:
            row = adapter.validate_python(record)
        except ValidationError as e:
            logger.debug(f"Validation failed for row {index} of {file_path.name}: {e}")
            errors = extract_validation_error_message(e.errors(), reverse_field_mapping)
            row_errors.append(_row_error(file_path, index, errors))
            continue

        if source.grain:
            key = source.grain_key(row)
            if key in first_seen:
                label = "/".join(map(str, key))
                message = f"duplicate {source.row_label} {label} (first on line {first_seen[key]})"
                errors = [{"column_name": ",".join(source.grain), "error_msg": message}]
                row_errors.append(_row_error(file_path, index, errors))
                continue
            first_seen[key] = index
        rows.append((index, row))
    logger.info(f"Read {len(rows)} valid rows from {file_path.name}")
    return rows


def _raise_if_errors(row_errors: list[dict], directory: Path) -> None:
    if not row_errors:
        return
    shown = "\n".join(
        f"  {e['file']}:{e['file_row_number']}: {e['errors']}" for e in row_errors[:MAX_REPORTED_ERRORS]
    )
    more = len(row_errors) - MAX_REPORTED_ERRORS
    suffix = f"\n  ... and {more} more" if more > 0 else ""
    raise DataValidationError(
        f"{len(row_errors)} invalid row(s) in {directory}:\n{shown}{suffix}", row_errors=row_errors
    )


def load_dataset(directory: Path) -> list[PatientRecord]:
    """Validate every row, then assemble PatientRecords; all errors are reported together."""
    directory = Path(directory)
    files = find_dataset_files(directory)
    row_errors: list[dict] = []

    subjects: list[tuple[int, SubjectRow]] = read_rows(
        files["subjects"], DATASET_SOURCES.get("subjects"), row_errors
    )
    measurements: list[tuple[int, MeasurementRow]] = read_rows(
        files["longitudinal"], DATASET_SOURCES.get("longitudinal"), row_errors
    )

    known = {row.subject_id for _, row in subjects}
    by_subject: dict[str, list[tuple[float, float]]] = defaultdict(list)
    for line, row in measurements:
        if row.subject_id not in known:
            errors = [{"column_name": "subject_id", "error_msg": f"unknown subject {row.subject_id}"}]
            row_errors.append(_row_error(files["longitudinal"], line, errors))
            continue
        by_subject[row.subject_id].append((row.time, row.value))

    patients = []
    for line, row in subjects:
        try:
            patients.append(
                PatientRecord(
                    id=row.subject_id,
                    age=row.age,
                    psad=row.psad,
                    measurements=tuple(by_subject.get(row.subject_id, ())),
                    biopsy_times=row.biopsy_times,
                    delta=row.delta,
                    terminal_time=row.terminal_time,
                )
            )
        except ValidationError as e:
            errors = [{"error_msg": err["msg"].lower()} for err in e.errors()]
            row_errors.append(_row_error(files["subjects"], line, errors))

    _raise_if_errors(row_errors, directory)
    if not patients:
        raise DataValidationError(f"Dataset {directory} has no subjects")
    logger.info(f"Loaded {len(patients)} subjects with {len(measurements)} measurements from {directory}")
    return patients


def _latent_mismatch(row: LatentRow, patient: Optional[PatientRecord]) -> Optional[str]:
    if patient is None:
        return f"unknown subject {row.subject_id}"
    terminal = patient.terminal_time
    if patient.delta == 1 and row.progression_time > terminal + TIME_TOLERANCE:
        return f"progression detected at {terminal} before the latent progression time {row.progression_time}"
    if patient.delta == 2 and abs(row.treatment_time - terminal) > TIME_TOLERANCE:
        return f"treatment observed at {terminal} but the latent treatment time is {row.treatment_time}"
    if patient.delta == 0 and row.treatment_time < terminal - TIME_TOLERANCE:
        return f"censored at {terminal} after the latent treatment time {row.treatment_time}"
    return None


def load_latent(
    directory: Path, patients: Optional[list[PatientRecord]] = None
) -> Optional[list[LatentRow]]:
    """Simulation truth rows, or None when the dataset carries none.

    With `patients`, every row must belong to a loaded subject and agree with
    its observed outcome.
    """
    directory = Path(directory)
    files = find_dataset_files(directory)
    if "latent" not in files:
        return None
    row_errors: list[dict] = []
    rows = read_rows(files["latent"], DATASET_SOURCES.get("latent"), row_errors)
    if patients is not None:
        by_id = {p.id: p for p in patients}
        for line, row in rows:
            message = _latent_mismatch(row, by_id.get(row.subject_id))
            if message:
                errors = [{"column_name": "subject_id", "error_msg": message}]
                row_errors.append(_row_error(files["latent"], line, errors))
    _raise_if_errors(row_errors, directory)
    return [row for _, row in rows]
