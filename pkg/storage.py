"""
Artifact storage: atomic file writes and a thread-safe output directory.
"""

import csv
import io
import os
import tempfile
import threading
import logging
from typing import Any, Dict, Iterable, List, Sequence, Union
from pathlib import Path

from errors import StorageError

logger = logging.getLogger(__name__)


def write_atomic(path: Union[str, Path], data: bytes):
    """
    Write a file by creating a temporary sibling and renaming it into place.

    Readers never observe a partially written file.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, 'wb') as f:
            f.write(data)
        os.replace(tmp_name, path)
    except Exception:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise


def csv_text(header: Sequence[str], rows: Iterable[Sequence[Any]]) -> str:
    """CSV document with ``\\n`` line endings; fields are quoted only when needed."""
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buffer.getvalue()


class ArtifactStore:
    """
    Thread-safe store for run outputs.
    Files live under one root directory; names may contain subdirectories
    but never escape the root.
    """

    def __init__(self, root: Union[str, Path] = "out"):
        """
        Initialize artifact storage.

        Args:
            root: Directory to store artifacts in
        """
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.lock = threading.Lock()
        self.operation_count = 0
        logger.info(f"Artifact store initialized at: {self.root.absolute()}")

    def path_for(self, name: str) -> Path:
        """Resolve a relative artifact name, rejecting directory traversal."""
        parts = Path(name).parts
        if not parts or Path(name).is_absolute() or any(p in ('.', '..') for p in parts):
            raise StorageError(f"Invalid artifact name: {name!r}")
        return self.root.joinpath(*parts)

    def put_bytes(self, name: str, data: bytes) -> Path:
        """
        Store an artifact.

        Args:
            name: Relative artifact name
            data: File contents as bytes

        Returns:
            Path of the written file
        """
        path = self.path_for(name)
        with self.lock:
            write_atomic(path, data)
            self.operation_count += 1
        logger.debug(f"Artifact PUT: {name} ({len(data)} bytes)")
        return path

    def put_text(self, name: str, text: str) -> Path:
        return self.put_bytes(name, text.encode('utf-8'))

    def get_bytes(self, name: str) -> bytes:
        """
        Read an artifact.

        Raises:
            FileNotFoundError: If the artifact does not exist
        """
        path = self.path_for(name)
        with self.lock:
            data = path.read_bytes()
            self.operation_count += 1
        return data

    def list_files(self) -> List[str]:
        """List all stored artifacts as sorted relative names."""
        with self.lock:
            return sorted(str(p.relative_to(self.root)) for p in self.root.rglob('*') if p.is_file())

    def get_stats(self) -> Dict[str, Any]:
        """Get artifact storage statistics."""
        with self.lock:
            files = [p for p in self.root.rglob('*') if p.is_file()]
            return {
                "file_count": len(files),
                "total_size": sum(p.stat().st_size for p in files),
                "operation_count": self.operation_count,
                "root": str(self.root.absolute())
            }
