"""Logging configuration for mnprobit.

Everything logs below the ``mnprobit`` package logger; :func:`setup_logging`
attaches a rich console handler (and optionally a file handler) to it and leaves
the root logger alone, so embedding applications keep their own configuration.
"""

import logging
from pathlib import Path
from typing import Any, Dict, List, Optional

from rich.console import Console
from rich.logging import RichHandler

console = Console(stderr=True)

PACKAGE_LOGGER = "mnprobit"
FILE_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"

LOG_LEVELS = {
    "DEBUG": logging.DEBUG,
    "INFO": logging.INFO,
    "WARNING": logging.WARNING,
    "ERROR": logging.ERROR,
    "CRITICAL": logging.CRITICAL,
}

_loggers: Dict[str, logging.Logger] = {}
_installed: List[logging.Handler] = []


def _console_handler(level: int) -> logging.Handler:
    handler = RichHandler(
        console=console,
        show_time=True,
        show_path=True,
        markup=False,
        rich_tracebacks=True,
    )
    handler.setLevel(level)
    handler.setFormatter(logging.Formatter(fmt="%(message)s", datefmt="[%X]"))
    return handler


def _file_handler(path: Path, level: int) -> logging.Handler:
    path.parent.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(path, mode="a", encoding="utf-8")
    handler.setLevel(level)
    handler.setFormatter(logging.Formatter(fmt=FILE_FORMAT, datefmt="%Y-%m-%d %H:%M:%S"))
    return handler


def setup_logging(
    level: str = "INFO",
    log_file: Optional[Path] = None,
    verbose: bool = False,
) -> logging.Logger:
    """Configure the package logger; calling it again replaces the previous handlers.

    Args:
        level: Logging level (DEBUG, INFO, WARNING, ERROR, CRITICAL)
        log_file: Optional path of a log file (appended to)
        verbose: Force DEBUG regardless of ``level``

    Returns:
        The configured ``mnprobit`` logger
    """
    resolved = logging.DEBUG if verbose else LOG_LEVELS.get(level.upper(), logging.INFO)
    package = logging.getLogger(PACKAGE_LOGGER)
    for handler in _installed:
        package.removeHandler(handler)
        handler.close()
    _installed.clear()

    _installed.append(_console_handler(resolved))
    if log_file:
        _installed.append(_file_handler(log_file, resolved))
    for handler in _installed:
        package.addHandler(handler)
    package.setLevel(resolved)
    package.propagate = False
    return package


def get_logger(name: str) -> logging.Logger:
    """Cached logger; names outside the package are nested under ``mnprobit``."""
    if name not in _loggers:
        qualified = name if name.split(".")[0] == PACKAGE_LOGGER else f"{PACKAGE_LOGGER}.{name}"
        _loggers[name] = logging.getLogger(qualified)
    return _loggers[name]


def _fmt(details: Optional[Dict[str, Any]]) -> str:
    if not details:
        return ""
    return " (" + ", ".join(f"{k}={v}" for k, v in details.items()) + ")"


def log_phase_start(phase: str, details: Optional[Dict[str, Any]] = None) -> None:
    """Log the start of a fitting phase.

    Args:
        phase: Phase name (e.g. "exact", "vb", "predict")
        details: Optional phase details
    """
    get_logger("mnprobit.execution").info(f"Starting {phase}{_fmt(details)}")


def log_phase_complete(
    phase: str,
    duration: Optional[float] = None,
    details: Optional[Dict[str, Any]] = None,
) -> None:
    """Log the completion of a fitting phase.

    Args:
        phase: Phase name
        duration: Optional phase duration in seconds
        details: Optional phase details
    """
    duration_str = f" in {duration:.2f}s" if duration is not None else ""
    get_logger("mnprobit.execution").info(f"Completed {phase}{duration_str}{_fmt(details)}")


def log_phase_error(
    phase: str,
    error: Exception,
    details: Optional[Dict[str, Any]] = None,
) -> None:
    """Log a failed phase.

    Args:
        phase: Phase name
        error: The error that occurred
        details: Optional phase details
    """
    get_logger("mnprobit.execution").error(f"Failed {phase}{_fmt(details)}: {error}")


def log_sampler_event(method: str, event: str, details: Optional[Dict[str, Any]] = None) -> None:
    """Log truncated-normal sampler events.

    Args:
        method: Sampler method (rejection, gibbs)
        event: Event description
        details: Optional event details
    """
    get_logger("mnprobit.sampler").debug(f"[{method}] {event}{_fmt(details)}")


def log_cavi_progress(sweep: int, delta: float, elbo: Optional[float] = None) -> None:
    """Log one CAVI sweep at debug level.

    Args:
        sweep: Sweep index (1-based)
        delta: Max absolute change of the block means
        elbo: Optional ELBO after the sweep
    """
    elbo_str = f", elbo={elbo:.10g}" if elbo is not None else ""
    get_logger("mnprobit.cavi").debug(f"sweep {sweep}: delta={delta:.3e}{elbo_str}")
