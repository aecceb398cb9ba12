"""Row schemas of the dataset files: subjects, PSA measurements and simulation truth."""

import math
from typing import Literal

from pydantic import Field, field_validator

from src.sources.base import CSVSource, TableModel

BIOPSY_SEPARATOR = ";"


def _finite(v: float) -> float:
    if not math.isfinite(v):
        raise ValueError(f"value must be finite, got {v}")
    return v


class SubjectRow(TableModel):
    subject_id: str = Field(min_length=1)
    age: float
    psad: float = Field(gt=0)
    delta: Literal[0, 1, 2]
    terminal_time: float = Field(ge=0)
    # Stored as "0;1.02;1.97" in the file
    biopsy_times: tuple[float, ...] = Field(min_length=1)

    @field_validator("biopsy_times", mode="before")
    @classmethod
    def split_biopsies(cls, v):
        if isinstance(v, str):
            parts = [p.strip() for p in v.split(BIOPSY_SEPARATOR)]
            return tuple(float(p) for p in parts if p)
        return v

    @field_validator("age", "terminal_time")
    @classmethod
    def check_finite(cls, v: float) -> float:
        return _finite(v)


class MeasurementRow(TableModel):
    subject_id: str = Field(min_length=1)
    time: float = Field(ge=0)
    # log2(PSA + 1)
    value: float = Field(alias="log2_psa")

    @field_validator("time", "value")
    @classmethod
    def check_finite(cls, v: float) -> float:
        return _finite(v)


class LatentRow(TableModel):
    subject_id: str = Field(min_length=1)
    u0: float
    u1: float
    u2: float
    u3: float
    age: float
    log_psad: float
    # inf when the event did not occur before the horizon
    progression_time: float
    treatment_time: float
    first_cause: Literal["", "prg", "trt"] = ""
    dropout_time: float


SUBJECTS = CSVSource(
    file_pattern="subjects.csv*",
    source_model=SubjectRow,
    table_name="subjects",
    row_label="subject",
    grain=["subject_id"],
)

LONGITUDINAL = CSVSource(
    file_pattern="longitudinal.csv*",
    source_model=MeasurementRow,
    table_name="longitudinal",
    row_label="measurement",
)

LATENT = CSVSource(
    file_pattern="latent.csv*",
    source_model=LatentRow,
    table_name="latent",
    row_label="latent subject",
    grain=["subject_id"],
    optional=True,
)
