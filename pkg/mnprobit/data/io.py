"""Dataset, Sigma, draw and result files.

Every float is written with 17 significant digits so that reading a file back
reproduces the arrays bit for bit.
"""

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, NamedTuple, Optional, Sequence, Union

import numpy as np
import pandas as pd

from .. import __version__
from ..core.draws import PosteriorDraws, PosteriorSummary, coefficient_names
from ..core.model import Dataset, SimulationTruth
from ..core.mvn import chol_psd
from ..core.pfm import PfmState, VbPosterior
from ..utils.errors import (
    MnprobitConfigError,
    MnprobitIOError,
    MnprobitSingularityError,
    MnprobitValidationError,
)
from ..utils.filesystem import prepare_output_dir, write_text_atomic
from ..utils.logging import get_logger

logger = get_logger(__name__)

FLOAT_FORMAT = "%.17g"
VB_STATE_FORMAT_VERSION = 1
SIGMA_SYMMETRY_TOL = 1e-8

PathLike = Union[str, Path]


def _read_table(path: PathLike, what: str) -> pd.DataFrame:
    path = Path(path)
    if not path.exists():
        raise MnprobitIOError(f"{what} file not found: {path}", context={"path": str(path)})
    try:
        return pd.read_csv(path, dtype=str, na_filter=False, on_bad_lines="error")
    except pd.errors.EmptyDataError as e:
        raise MnprobitValidationError(
            f"{what} file is empty: {path}", context={"path": str(path)}, cause=e
        ) from e
    except pd.errors.ParserError as e:
        context: Dict[str, Any] = {"path": str(path)}
        match = re.search(r"line (\d+)", str(e))
        if match:
            context["line"] = int(match.group(1))
        raise MnprobitValidationError(
            f"Malformed {what.lower()} file {path}: {e}", context=context, cause=e
        ) from e


def _parse_column(frame: pd.DataFrame, column: str, path: PathLike) -> np.ndarray:
    """Strict float parse of one column; the error names the file line (header is line 1)."""
    raw = frame[column].to_numpy()
    try:
        values = raw.astype(float)
    except (TypeError, ValueError):
        values = None
    if values is not None and np.all(np.isfinite(values)):
        return values
    for row, cell in enumerate(raw):
        try:
            ok = np.isfinite(float(cell))
        except (TypeError, ValueError):
            ok = False
        if not ok:
            line = row + 2
            raise MnprobitValidationError(
                f"Cannot parse value {cell!r} in column '{column}' at line {line} of {path}",
                context={"path": str(path), "line": line},
            )
    raise MnprobitValidationError(f"Cannot parse column '{column}' of {path}")


def _to_csv_text(frame: pd.DataFrame) -> str:
    return frame.to_csv(index=False, float_format=FLOAT_FORMAT, lineterminator="\n")


def read_dataset(path: PathLike, n_classes: Optional[int] = None) -> Dataset:
    """Read a ``y,x1..xp`` CSV; L is max(y) unless ``n_classes`` is given."""
    frame = _read_table(path, "Dataset")
    columns = list(frame.columns)
    p = len(columns) - 1
    expected = ["y"] + [f"x{k}" for k in range(1, p + 1)]
    if p < 1 or columns != expected:
        raise MnprobitValidationError(
            f"Dataset header must be {','.join(expected) if p >= 1 else 'y,x1,...'}, "
            f"got {','.join(columns)}",
            context={"path": str(path), "line": 1},
        )
    if frame.shape[0] == 0:
        raise MnprobitValidationError(f"Dataset has no rows: {path}", context={"path": str(path)})

    y_float = _parse_column(frame, "y", path)
    fractional = np.flatnonzero(y_float != np.round(y_float))
    if fractional.size:
        line = int(fractional[0]) + 2
        raise MnprobitValidationError(
            f"Class label at line {line} of {path} is not an integer",
            context={"path": str(path), "line": line},
        )
    X = np.column_stack([_parse_column(frame, f"x{k}", path) for k in range(1, p + 1)])
    data = Dataset(y=y_float.astype(np.int64), X=X, n_classes=n_classes)
    logger.debug(f"Read dataset {path}: n={data.n}, p={data.p}, L={data.L}")
    return data


def write_dataset(dataset: Dataset, path: PathLike) -> Path:
    columns: Dict[str, Any] = {"y": dataset.y}
    for k in range(dataset.p):
        columns[f"x{k + 1}"] = dataset.X[:, k]
    return write_text_atomic(Path(path), _to_csv_text(pd.DataFrame(columns)))


def read_covariates(path: PathLike, p: int) -> np.ndarray:
    """Read prediction covariates with header ``x1..xp`` (a ``y`` column is ignored)."""
    frame = _read_table(path, "Covariate")
    columns = [c for c in frame.columns if c != "y"]
    expected = [f"x{k}" for k in range(1, p + 1)]
    if columns != expected:
        raise MnprobitValidationError(
            f"Covariate header must be {','.join(expected)}, got {','.join(columns)}",
            context={"path": str(path), "line": 1, "p": p},
        )
    if frame.shape[0] == 0:
        raise MnprobitValidationError(f"Covariate file has no rows: {path}")
    return np.column_stack([_parse_column(frame, c, path) for c in expected])


def read_sigma(source: Union[str, Path], L: int) -> np.ndarray:  # noqa: N803
    """``identity`` or an L x L headerless CSV, validated for symmetry and positive definiteness."""
    if str(source) == "identity":
        return np.eye(L)
    path = Path(source)
    if not path.exists():
        raise MnprobitConfigError(f"Sigma file not found: {path}", context={"module": "data_io"})
    try:
        frame = pd.read_csv(path, header=None, float_precision="round_trip")
        sigma = frame.to_numpy(dtype=float)
    except (pd.errors.ParserError, pd.errors.EmptyDataError, ValueError) as e:
        raise MnprobitConfigError(
            f"Cannot parse Sigma file {path}: {e}", context={"module": "data_io"}, cause=e
        ) from e
    if sigma.shape != (L, L):
        raise MnprobitConfigError(
            f"Sigma must be {L}x{L}, got {sigma.shape[0]}x{sigma.shape[1]}",
            context={"module": "data_io", "path": str(path)},
        )
    if not np.all(np.isfinite(sigma)):
        raise MnprobitConfigError(f"Sigma has non-finite entries: {path}")
    asymmetry = float(np.max(np.abs(sigma - sigma.T)))
    if asymmetry > SIGMA_SYMMETRY_TOL:
        raise MnprobitConfigError(
            f"Sigma is not symmetric (max asymmetry {asymmetry:.3e})",
            context={"module": "data_io", "path": str(path)},
        )
    sigma = 0.5 * (sigma + sigma.T)
    try:
        chol_psd(sigma, max_jitter=0.0, name="Sigma")
    except MnprobitSingularityError as e:
        raise MnprobitConfigError(
            "Sigma is not positive definite", context={"module": "data_io", "path": str(path)}, cause=e
        ) from e
    return sigma


def write_draws(draws: PosteriorDraws, path: PathLike) -> Path:
    frame = pd.DataFrame(draws.samples, columns=coefficient_names(draws.q))
    return write_text_atomic(Path(path), _to_csv_text(frame))


def read_draws(path: PathLike, source: str = "exact") -> PosteriorDraws:
    """Read a draw matrix with header ``b_1..b_q``."""
    frame = _read_table(path, "Draws")
    expected = coefficient_names(len(frame.columns))
    if list(frame.columns) != expected:
        raise MnprobitValidationError(
            f"Draws header must be b_1..b_q, got {','.join(frame.columns)}",
            context={"path": str(path), "line": 1},
        )
    if frame.shape[0] == 0:
        raise MnprobitValidationError(f"Draws file has no rows: {path}", context={"path": str(path)})
    samples = np.column_stack([_parse_column(frame, c, path) for c in expected])
    return PosteriorDraws(samples=samples, source=source)


def write_vb_state(vb: VbPosterior, path: PathLike) -> Path:
    """Versioned JSON snapshot of the CAVI state for resumable runs."""
    state = vb.state
    payload = {
        "format_version": VB_STATE_FORMAT_VERSION,
        "n": int(state.m.shape[0]),
        "block_size": int(state.m.shape[1]),
        "m": state.m.tolist(),
        "mu": None if state.mu is None else state.mu.tolist(),
        "cov": None if state.cov is None else state.cov.tolist(),
        "sweep_count": state.sweep_count,
        "last_delta": state.last_delta,
        "converged": state.converged,
        "eps": vb.eps,
        "seed": vb.seed,
    }
    return write_text_atomic(Path(path), json.dumps(payload, indent=2, sort_keys=True) + "\n")


class StoredVbState(NamedTuple):
    state: PfmState
    eps: float
    seed: Optional[int]


def read_vb_state(path: PathLike) -> StoredVbState:
    path = Path(path)
    if not path.exists():
        raise MnprobitIOError(f"Variational state file not found: {path}")
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise MnprobitValidationError(
            f"Malformed variational state file {path}: {e}", cause=e
        ) from e
    version = payload.get("format_version")
    if version != VB_STATE_FORMAT_VERSION:
        raise MnprobitValidationError(
            f"Unsupported variational state format {version!r} (expected {VB_STATE_FORMAT_VERSION})",
            context={"path": str(path)},
        )
    m = np.asarray(payload["m"], dtype=float)
    if m.shape != (payload["n"], payload["block_size"]):
        raise MnprobitValidationError(f"Variational state {path} has inconsistent block means")
    state = PfmState(
        m=m,
        sweep_count=int(payload["sweep_count"]),
        converged=bool(payload["converged"]),
        last_delta=float(payload["last_delta"]),
        mu=None if payload.get("mu") is None else np.asarray(payload["mu"], dtype=float),
        cov=None if payload.get("cov") is None else np.asarray(payload["cov"], dtype=float),
    )
    return StoredVbState(state=state, eps=float(payload["eps"]), seed=payload.get("seed"))


def write_truth(truth: SimulationTruth, path: PathLike) -> Path:
    return write_text_atomic(Path(path), json.dumps(truth.to_dict(), indent=2, sort_keys=True) + "\n")


def write_summary(summary: PosteriorSummary, path: PathLike) -> Path:
    return write_text_atomic(Path(path), _to_csv_text(summary.to_frame()))


@dataclass
class ResultRecord:
    """Everything a fit produces.

    ``timing`` is written to its own file so that ``result.json`` is byte-identical
    across reruns with the same configuration and seed.
    """

    config: Dict[str, Any]
    model: Dict[str, Any]
    summaries: Dict[str, PosteriorSummary] = field(default_factory=dict)
    log_evidence: Optional[float] = None
    diagnostics: Dict[str, Any] = field(default_factory=dict)
    timing: Dict[str, float] = field(default_factory=dict)
    comparison: Optional[pd.DataFrame] = None
    draws: Dict[str, PosteriorDraws] = field(default_factory=dict)
    vb: Optional[VbPosterior] = None
    version: str = __version__

    @property
    def methods(self) -> List[str]:
        return sorted(self.summaries)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "version": self.version,
            "config": self.config,
            "model": self.model,
            "methods": self.methods,
            "summaries": {name: s.to_dict() for name, s in sorted(self.summaries.items())},
            "log_evidence": self.log_evidence,
            "diagnostics": self.diagnostics,
        }


def write_results(record: ResultRecord, directory: PathLike, save_draws: bool = True) -> List[Path]:
    """Write result.json, timing.json, the summary tables and optionally the draws.

    Raises:
        MnprobitIOError: If the directory cannot be written
    """
    out = prepare_output_dir(Path(directory))
    written = [
        write_text_atomic(
            out / "result.json", json.dumps(record.to_dict(), indent=2, sort_keys=True) + "\n"
        ),
        write_text_atomic(
            out / "timing.json", json.dumps(record.timing, indent=2, sort_keys=True) + "\n"
        ),
    ]
    for name, summary in sorted(record.summaries.items()):
        written.append(write_summary(summary, out / f"summary_{name}.csv"))
    if record.comparison is not None:
        written.append(write_text_atomic(out / "comparison.csv", _to_csv_text(record.comparison)))
    if save_draws:
        for name, draws in sorted(record.draws.items()):
            written.append(write_draws(draws, out / f"draws_{name}.csv"))
    if record.vb is not None:
        written.append(write_vb_state(record.vb, out / "vb_state.json"))
    logger.info(f"Wrote {len(written)} result files to {out}")
    return written


def comparison_table(
    exact: PosteriorSummary, vb: PosteriorSummary, names: Optional[Sequence[str]] = None
) -> pd.DataFrame:
    """Per-coordinate mean difference in units of the exact Monte Carlo standard error."""
    se = exact.sd / np.sqrt(exact.n_draws)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(se > 0.0, (vb.mean - exact.mean) / se, 0.0)
        sd_ratio = np.where(exact.sd > 0.0, vb.sd / exact.sd, np.nan)
    return pd.DataFrame(
        {
            "coef": list(names) if names is not None else exact.names,
            "mean_exact": exact.mean,
            "mean_vb": vb.mean,
            "sd_exact": exact.sd,
            "sd_vb": vb.sd,
            "z_mean_diff": z,
            "sd_ratio": sd_ratio,
        }
    )


def read_result(directory: PathLike) -> Dict[str, Any]:
    """Load ``result.json`` from a fit output directory."""
    path = Path(directory) / "result.json"
    if not path.exists():
        raise MnprobitIOError(f"No fit result found at {path}", context={"path": str(path)})
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise MnprobitValidationError(f"Malformed result file {path}: {e}", cause=e) from e


def write_predictions(probabilities: np.ndarray, source: str, path: PathLike) -> Path:
    """Class-probability table with columns ``row, p_1..p_L, source``."""
    columns: Dict[str, Any] = {"row": np.arange(1, probabilities.shape[0] + 1)}
    for ell in range(probabilities.shape[1]):
        columns[f"p_{ell + 1}"] = probabilities[:, ell]
    columns["source"] = source
    return write_text_atomic(Path(path), _to_csv_text(pd.DataFrame(columns)))
