from fnmatch import fnmatch
from pathlib import Path
from typing import Any, Type

from pydantic import BaseModel, ConfigDict, Field, model_validator


class TableModel(BaseModel):
    model_config = ConfigDict(validate_by_name=True, validate_by_alias=True)


class DataSource(BaseModel):
    """One table of a dataset directory: which files hold it and how rows validate."""

    file_pattern: str
    source_model: Type[TableModel]
    table_name: str
    # Label used in row error messages ("duplicate subject S1")
    row_label: str
    # Columns that must be unique across the table; empty allows repeats
    grain: list[str] = Field(default_factory=list)
    # Files a dataset directory may omit
    optional: bool = False

    @model_validator(mode="after")
    def check_grain(self):
        fields = set(self.source_model.model_fields)
        unknown = [column for column in self.grain if column not in fields]
        if unknown:
            raise ValueError(
                f"Grain columns {unknown} are not fields of {self.source_model.__name__}; "
                f"available: {sorted(fields)}"
            )
        return self

    def matches_file(self, file_path: str) -> bool:
        return fnmatch(Path(file_path).name.lower(), self.file_pattern.lower())

    def grain_key(self, row: TableModel) -> tuple[Any, ...]:
        return tuple(getattr(row, column) for column in self.grain)


class CSVSource(DataSource):
    delimiter: str = ","
    encoding: str = "utf-8"
    skip_rows: int = Field(default=0, ge=0)
