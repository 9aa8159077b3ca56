"""Posterior draw containers and their summaries."""

from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from ..utils.errors import MnprobitValidationError


def coefficient_names(q: int) -> List[str]:
    return [f"b_{k}" for k in range(1, q + 1)]


def quantile_column(level: float) -> str:
    return f"q_{level:g}"


@dataclass(eq=False)
class PosteriorDraws:
    """N x q matrix of coefficient draws with the seed and sampler diagnostics."""

    samples: np.ndarray
    seed: Optional[int] = None
    sampler_diag: Dict[str, Any] = field(default_factory=dict)
    source: str = "exact"
    components: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self) -> None:
        samples = np.asarray(self.samples, dtype=float)
        if samples.ndim == 1:
            samples = samples[:, np.newaxis]
        if samples.ndim != 2 or samples.shape[0] < 1:
            raise MnprobitValidationError(
                f"Draw matrix must be N x q with N >= 1, got shape {samples.shape}"
            )
        if not np.all(np.isfinite(samples)):
            raise MnprobitValidationError("Draw matrix contains non-finite entries")
        self.samples = samples

    @property
    def n_draws(self) -> int:
        return int(self.samples.shape[0])

    @property
    def q(self) -> int:
        return int(self.samples.shape[1])


@dataclass(eq=False)
class PosteriorSummary:
    """Per-coordinate mean, sd and quantiles plus the full sample covariance."""

    names: List[str]
    mean: np.ndarray
    sd: np.ndarray
    levels: List[float]
    quantiles: np.ndarray
    cov: np.ndarray
    n_draws: int

    def to_frame(self) -> pd.DataFrame:
        """Summary table with one row per coefficient; quantile columns only if requested."""
        columns: Dict[str, Any] = {"coef": self.names, "mean": self.mean, "sd": self.sd}
        for k, level in enumerate(self.levels):
            columns[quantile_column(level)] = self.quantiles[k]
        return pd.DataFrame(columns)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "n_draws": self.n_draws,
            "coefficients": self.names,
            "mean": self.mean.tolist(),
            "sd": self.sd.tolist(),
            "quantiles": {
                quantile_column(level): self.quantiles[k].tolist()
                for k, level in enumerate(self.levels)
            },
            "cov": self.cov.tolist(),
        }


def summarize(draws: PosteriorDraws, levels: Sequence[float] = (0.025, 0.5, 0.975)) -> PosteriorSummary:
    """Summarize draws; needs at least two of them for the sample covariance."""
    if draws.n_draws < 2:
        raise MnprobitValidationError(
            f"At least 2 draws are needed for a summary, got {draws.n_draws}"
        )
    level_list = [float(level) for level in levels]
    for level in level_list:
        if not 0.0 < level < 1.0:
            raise MnprobitValidationError(f"Quantile level {level} outside (0, 1)")

    samples = draws.samples
    cov = np.atleast_2d(np.cov(samples, rowvar=False))
    cov = 0.5 * (cov + cov.T)
    if level_list:
        quantiles = np.atleast_2d(np.quantile(samples, level_list, axis=0))
    else:
        quantiles = np.empty((0, draws.q))
    return PosteriorSummary(
        names=coefficient_names(draws.q),
        mean=samples.mean(axis=0),
        sd=samples.std(axis=0, ddof=1),
        levels=level_list,
        quantiles=quantiles,
        cov=cov,
        n_draws=draws.n_draws,
    )
