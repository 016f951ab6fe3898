"""
Run Artifact Storage Service

Writes CSV, JSON, JSON-lines and YAML artifacts into a run directory with
file locking, so concurrent runs sharing an output directory never
interleave their writes.
"""

import json
import logging
from pathlib import Path
from typing import Any, Iterable, Optional, Union

import pandas as pd
import yaml
from filelock import FileLock, Timeout
from pydantic import BaseModel

from config import get_settings

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.17g"


class StorageError(Exception):
    """Base exception for storage service errors."""
    pass


class OutputLockError(StorageError):
    """Raised when the output directory lock cannot be acquired."""
    pass


def _plain(data: Union[BaseModel, dict, list]) -> Any:
    if isinstance(data, BaseModel):
        return data.model_dump(mode="json")
    if isinstance(data, list):
        return [_plain(item) for item in data]
    return data


class RunStorage:
    """Service for writing run artifacts with concurrent access control."""

    def __init__(self, output_dir: str, seed: int = 0, timeout: Optional[int] = None):
        """
        Initialize run storage.

        Args:
            output_dir: Directory receiving the artifacts
            seed: Run seed, recorded in every CSV header
            timeout: Lock acquisition timeout in seconds (settings default)
        """
        settings = get_settings()
        self.output_dir = Path(output_dir)
        self.output_dir.mkdir(parents=True, exist_ok=True)
        self.seed = seed
        self.timeout = settings.lock_timeout_seconds if timeout is None else timeout
        self.header = f"# {settings.app_name} {settings.app_version} seed={seed}"
        self.written: list[str] = []
        logger.info(f"Run storage initialized at: {self.output_dir}")

    def _lock(self) -> FileLock:
        return FileLock(self.output_dir / ".run.lock", timeout=self.timeout)

    def _write(self, name: str, text: str) -> Path:
        path = self.output_dir / name
        try:
            with self._lock():
                path.parent.mkdir(parents=True, exist_ok=True)
                path.write_text(text, encoding="utf-8")
        except Timeout:
            raise OutputLockError(f"Could not acquire lock for {self.output_dir} within {self.timeout} seconds")
        self.written.append(name)
        logger.debug(f"Wrote {path}")
        return path

    def write_csv(self, name: str, frame: pd.DataFrame) -> Path:
        """CSV with a '# app version seed' header line and full-precision floats."""
        body = frame.to_csv(index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
        return self._write(name, f"{self.header}\n{body}")

    def write_json(self, name: str, data: Union[BaseModel, dict, list]) -> Path:
        return self._write(name, json.dumps(_plain(data), ensure_ascii=False, indent=2))

    def write_jsonl(self, name: str, records: Iterable[Union[BaseModel, dict]]) -> Path:
        lines = [json.dumps(_plain(record), ensure_ascii=False) for record in records]
        return self._write(name, "\n".join(lines) + ("\n" if lines else ""))

    def write_yaml(self, name: str, data: Union[BaseModel, dict]) -> Path:
        return self._write(name, yaml.safe_dump(_plain(data), sort_keys=False))

    def read_csv(self, name: str) -> pd.DataFrame:
        """Read back a CSV written by write_csv."""
        path = self.output_dir / name
        if not path.exists():
            raise StorageError(f"Artifact {name} not found in {self.output_dir}")
        return pd.read_csv(path, comment="#")


__all__ = ["StorageError", "OutputLockError", "RunStorage", "FLOAT_FORMAT"]
