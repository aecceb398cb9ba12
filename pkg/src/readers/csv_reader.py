import csv
import gzip
from pathlib import Path
from typing import Any, Iterator

from src.exceptions import SchemaError
from src.readers.base_reader import BaseReader
from src.sources.base import CSVSource


class CSVReader(BaseReader):
    def __init__(self, file_path: Path, source: CSVSource, delimiter: str, encoding: str, skip_rows: int):
        super().__init__(file_path, source)
        self.delimiter = delimiter
        self.encoding = encoding
        self.skip_rows = skip_rows

    @property
    def starting_row_number(self) -> int:
        # header occupies line 1
        return 2 + self.skip_rows

    def _open(self):
        if self.is_gzipped:
            return gzip.open(self.file_path, "rt", encoding=self.encoding, newline="")
        return open(self.file_path, encoding=self.encoding, newline="")

    def read(self) -> Iterator[dict[str, Any]]:
        with self._open() as handle:
            rows = csv.DictReader(handle, delimiter=self.delimiter)
            header = [name.strip() for name in rows.fieldnames or () if name and name.strip()]
            if not header:
                raise SchemaError(f"No headers found in {self.file_path.name}")
            self.check_columns(header)

            for line, row in enumerate(rows):
                if line < self.skip_rows:
                    continue
                # ragged rows put surplus cells under the None key
                yield {name.strip(): value for name, value in row.items() if name is not None}

    @classmethod
    def matches_source_type(cls, source_type: type) -> bool:
        return issubclass(source_type, CSVSource)
