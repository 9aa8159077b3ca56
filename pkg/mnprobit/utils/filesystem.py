"""File system utilities for mnprobit."""

import os
import tempfile
from pathlib import Path
from typing import Optional

from .errors import MnprobitIOError
from .logging import get_logger

logger = get_logger(__name__)


def ensure_directory_writable(directory: Path) -> bool:
    """Ensure directory exists and is writable.

    Args:
        directory: Directory to check

    Returns:
        True if directory is writable
    """
    try:
        directory.mkdir(parents=True, exist_ok=True)

        test_file = directory / ".mnprobit_write_test"
        test_file.write_text("test")
        test_file.unlink()

        return True

    except OSError as e:
        logger.warning(f"Directory not writable {directory}: {e}")
        return False


def prepare_output_dir(directory: Path) -> Path:
    """Create the results directory or fail with an I/O error.

    Args:
        directory: Target directory

    Returns:
        The directory path

    Raises:
        MnprobitIOError: If the directory cannot be created or written
    """
    if not ensure_directory_writable(directory):
        raise MnprobitIOError(
            f"Output directory is not writable: {directory}",
            context={"module": "data_io", "path": str(directory)},
        )
    return directory


def write_text_atomic(path: Path, text: str) -> Path:
    """Write a text file through a temporary sibling and rename it into place.

    Args:
        path: Destination file
        text: File contents (written as UTF-8 with ``\\n`` newlines)

    Returns:
        The destination path

    Raises:
        MnprobitIOError: If writing fails
    """
    tmp_name: Optional[str] = None
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp_name = tempfile.mkstemp(prefix=f".{path.name}.", dir=str(path.parent))
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as handle:
            handle.write(text)
        os.replace(tmp_name, path)
        logger.debug(f"Wrote {path}")
        return path
    except OSError as e:
        _discard(tmp_name)
        raise MnprobitIOError(
            f"Failed to write {path}: {e}", context={"path": str(path)}, cause=e
        ) from e
    except BaseException:
        _discard(tmp_name)
        raise


def _discard(tmp_name: Optional[str]) -> None:
    if tmp_name is not None and os.path.exists(tmp_name):
        os.unlink(tmp_name)
