"""
Line-delimited JSON streams for per-iteration records.

Each record is serialized with sorted keys and flushed as soon as it is
written, so a crashed run leaves a readable prefix.
"""

import json
import logging
from pathlib import Path
from typing import Any, Dict, Generator, Iterable, List, Optional, TextIO

from .records import dumps

logger = logging.getLogger(__name__)


class NdjsonWriter:
    """
    Append-only NDJSON writer.

    The file is opened lazily on the first record; ``truncate`` starts a
    fresh stream instead of appending to an existing one.
    """

    def __init__(self, filepath: Path, truncate: bool = True):
        self.filepath = Path(filepath)
        self.truncate = truncate
        self._fh: Optional[TextIO] = None
        self.count = 0

    def _open(self) -> TextIO:
        if self._fh is None:
            self.filepath.parent.mkdir(parents=True, exist_ok=True)
            try:
                self._fh = open(self.filepath, "w" if self.truncate else "a", encoding="utf-8")
            except OSError as e:
                raise RuntimeError(f"Failed to open log file {self.filepath}: {e}")
        return self._fh

    def write(self, record: Any) -> None:
        """Write one record: a dict, or an object with ``to_json()``."""
        line = record.to_json() if hasattr(record, "to_json") else dumps(record)
        json.loads(line)
        fh = self._open()
        try:
            fh.write(line + "\n")
            fh.flush()
        except OSError as e:
            raise RuntimeError(f"Failed to write to log file {self.filepath}: {e}")
        self.count += 1

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    def __enter__(self) -> "NdjsonWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def log_records(stream: Iterable[Any], writer: NdjsonWriter) -> Generator[Any, None, None]:
    """Pass-through generator that writes each record as it goes by."""
    for record in stream:
        writer.write(record)
        yield record


def read_ndjson(filepath: Path) -> List[Dict[str, Any]]:
    """
    Parse every non-empty line of an NDJSON file.

    Raises:
        ValueError: With the offending line number on malformed JSON
    """
    records = []
    with open(filepath, "r", encoding="utf-8") as f:
        for line_num, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise ValueError(f"Invalid JSON at line {line_num} of {filepath}: {e}") from e
    return records
