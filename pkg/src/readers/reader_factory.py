from pathlib import Path

from src.exceptions import InputError
from src.readers.base_reader import BaseReader
from src.readers.csv_reader import CSVReader
from src.sources.base import DataSource

READERS: dict[str, type[BaseReader]] = {
    ".csv": CSVReader,
    ".csv.gz": CSVReader,
}


class ReaderFactory:
    @staticmethod
    def extension(file_path: Path) -> str:
        """Compound suffix ('.csv.gz') when registered, else the last suffix."""
        compound = "".join(file_path.suffixes[-2:]).lower()
        return compound if compound in READERS else file_path.suffix.lower()

    @classmethod
    def is_supported(cls, file_path: Path) -> bool:
        return cls.extension(file_path) in READERS

    @classmethod
    def create_reader(cls, file_path: Path, source: DataSource) -> BaseReader:
        extension = cls.extension(file_path)
        reader_class = READERS.get(extension)
        if reader_class is None:
            raise InputError(
                f"Unsupported file extension: {extension}. Supported extensions: {', '.join(READERS)}"
            )
        if not reader_class.matches_source_type(type(source)):
            raise InputError(
                f"{file_path.name} needs a {reader_class.__name__} source, got {type(source).__name__}"
            )
        options = source.model_dump(include={"delimiter", "encoding", "skip_rows"})
        return reader_class(file_path, source, **options)
