import os

# Needs to happen before local imports
os.environ["ENV_STATE"] = "test"

import csv
from pathlib import Path

import pytest

from src.simulator import SimTruth, simulate_dataset
from src.tests.fixtures.cohorts import random_cohort, small_spec

SUBJECT_HEADER = ["subject_id", "age", "psad", "delta", "terminal_time", "biopsy_times"]
LONGITUDINAL_HEADER = ["subject_id", "time", "log2_psa"]


def write_csv(path: Path, header: list[str], rows: list[list]) -> Path:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        writer.writerows(rows)
    return path


@pytest.fixture
def temp_directory(tmp_path):
    return Path(tmp_path)


@pytest.fixture
def spec():
    return small_spec()


@pytest.fixture
def cohort():
    return random_cohort(12, seed=3)


@pytest.fixture(scope="session")
def sim_truth():
    # Fixed dropout rate keeps the tests clear of the calibration loop
    return SimTruth(n_subjects=40, dropout_rate=0.08)


@pytest.fixture(scope="session")
def simulated(sim_truth):
    return simulate_dataset(sim_truth, seed=11)


@pytest.fixture
def dataset_dir(temp_directory):
    """A valid three-subject dataset directory."""
    write_csv(
        temp_directory / "subjects.csv",
        SUBJECT_HEADER,
        [
            ["S1", "61.5", "0.12", "0", "4.5", "0;1.02;1.97;4.01"],
            ["S2", "58.0", "0.08", "1", "1.98", "0;1.05;1.98"],
            ["S3", "70.2", "0.2", "2", "3.3", "0;0.97;2.03"],
        ],
    )
    write_csv(
        temp_directory / "longitudinal.csv",
        LONGITUDINAL_HEADER,
        [
            ["S1", "0", "2.1"],
            ["S1", "0.5", "2.3"],
            ["S1", "1.0", "2.2"],
            ["S2", "0", "3.0"],
            ["S2", "1.5", "3.4"],
            ["S3", "0", "2.6"],
            ["S3", "3.0", "2.9"],
        ],
    )
    return temp_directory


@pytest.fixture
def dataset_with_errors(temp_directory):
    """Subjects with a bad delta, a non-numeric age and a measurement for an unknown subject."""
    write_csv(
        temp_directory / "subjects.csv",
        SUBJECT_HEADER,
        [
            ["S1", "61.5", "0.12", "0", "4.5", "0;1.02;1.97;4.01"],
            ["S2", "58.0", "0.08", "5", "1.98", "0;1.05;1.98"],
            ["S3", "old", "0.2", "2", "3.3", "0;0.97;2.03"],
        ],
    )
    write_csv(
        temp_directory / "longitudinal.csv",
        LONGITUDINAL_HEADER,
        [
            ["S1", "0", "2.1"],
            ["S9", "0.5", "2.3"],
        ],
    )
    return temp_directory
