"""File utilities for dataset discovery, atomic writes, and CSV logs."""

import csv
import os
import tempfile
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Union

from rich.console import Console

from trisr.exceptions import IoError

console = Console(stderr=True)

VOLUME_PATTERNS = ["*.rvol", "*.nii"]


def find_files_by_pattern(
    base_dir: Union[str, Path],
    patterns: List[str],
    recursive: bool = False,
) -> List[Path]:
    """
    Find files matching any of the given patterns.

    Args:
        base_dir: Directory to search in
        patterns: List of glob patterns to match
        recursive: Whether to search recursively

    Returns:
        Sorted list of unique file paths matching any pattern
    """
    base_path = Path(base_dir)
    found = set()

    for pattern in patterns:
        matches = base_path.rglob(pattern) if recursive else base_path.glob(pattern)
        found.update(p for p in matches if p.is_file())

    # Sorted so dataset order never depends on the filesystem
    return sorted(found)


def find_volume_files(path: Union[str, Path]) -> List[Path]:
    """Return the volume files under a directory, or the path itself if it is a file."""
    path = Path(path)
    if path.is_file():
        return [path]
    if not path.is_dir():
        raise IoError(f"No such file or directory: {path}")
    return find_files_by_pattern(path, VOLUME_PATTERNS)


def ensure_dir(path: Union[str, Path]) -> Path:
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise IoError(f"Cannot create directory {path}: {e}") from e
    return path


def safe_remove_file(file_path: Union[str, Path]) -> bool:
    """
    Safely remove a file, ignoring errors.

    Args:
        file_path: Path to file to remove

    Returns:
        True if file was removed or didn't exist, False if error occurred
    """
    try:
        Path(file_path).unlink()
        return True
    except FileNotFoundError:
        return True
    except Exception:
        return False


def atomic_write_bytes(path: Union[str, Path], payload: bytes) -> Path:
    """Write bytes to a temp file in the target directory, then rename over the target."""
    path = Path(path)
    directory = path.parent if str(path.parent) else Path(".")
    tmp_name: Optional[str] = None
    try:
        directory.mkdir(parents=True, exist_ok=True)
        fd, tmp_name = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=directory)
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp_name, path)
        tmp_name = None
    except OSError as e:
        raise IoError(f"Cannot write {path}: {e}") from e
    finally:
        if tmp_name is not None:
            safe_remove_file(tmp_name)
    return path


def atomic_write_text(path: Union[str, Path], text: str) -> Path:
    return atomic_write_bytes(path, text.encode("utf-8"))


def read_bytes(path: Union[str, Path]) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as e:
        raise IoError(f"Cannot read {path}: {e}") from e


def format_file_size(size_bytes: float) -> str:
    """Format file size in human readable format."""
    for unit in ['B', 'KB', 'MB', 'GB']:
        if size_bytes < 1024.0:
            return f"{size_bytes:.1f} {unit}"
        size_bytes /= 1024.0
    return f"{size_bytes:.1f} TB"


class CsvLog:
    """Append-only CSV file with a fixed header, flushed after every row."""

    def __init__(self, path: Union[str, Path], columns: Sequence[str], append: bool = False):
        self.path = Path(path)
        self.columns = list(columns)
        exists = self.path.exists() and self.path.stat().st_size > 0
        try:
            ensure_dir(self.path.parent)
            self._file = open(self.path, "a" if append else "w", newline="")
        except OSError as e:
            raise IoError(f"Cannot open {self.path}: {e}") from e
        self._writer = csv.writer(self._file)
        if not (append and exists):
            self._writer.writerow(self.columns)
            self._file.flush()

    def write(self, row: Iterable[object]) -> None:
        self._writer.writerow(list(row))
        self._file.flush()

    def close(self) -> None:
        self._file.close()

    def __enter__(self) -> "CsvLog":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def write_csv(path: Union[str, Path], columns: Sequence[str], rows: Iterable[Iterable[object]]) -> Path:
    with CsvLog(path, columns) as log:
        for row in rows:
            log.write(row)
    return Path(path)


def read_csv(path: Union[str, Path]) -> List[List[str]]:
    """Read a CSV file, header included."""
    try:
        with open(path, newline="") as f:
            return [row for row in csv.reader(f)]
    except OSError as e:
        raise IoError(f"Cannot read {path}: {e}") from e
