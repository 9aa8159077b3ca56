"""Multivariate-normal primitives used by every posterior formula.

Orthant CDFs (exact in one and two dimensions, randomized quasi-Monte Carlo
separation of variables above), jittered Cholesky factorization, plain and
truncated multivariate normal sampling, and first/second moments of
lower-truncated multivariate normals.
"""

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import integrate, linalg, sparse
from scipy.sparse import csgraph
from scipy.special import log_ndtr, logsumexp, ndtr, ndtri
from scipy.stats import multivariate_normal, norm, qmc

from ..utils.errors import (
    MnprobitCapacityError,
    MnprobitInfeasibleMethodError,
    MnprobitNumericError,
    MnprobitSingularityError,
    MnprobitValidationError,
)
from ..utils.logging import get_logger, log_sampler_event
from ..utils.rng import RngLike, make_rng

logger = get_logger(__name__)

DEFAULT_MAX_JITTER = 1e-6
DEFAULT_CDF_TOL = 1e-6
CDF_DIM_CAP = 1000
ANALYTIC_MOMENT_CAP = 8
QMC_SEED = 918_273_645
QMC_RANDOMIZATIONS = 8
QMC_MIN_POINTS_LOG2 = 10
QMC_MAX_POINTS_LOG2 = 16
QMC_ORDER_DECIMALS = 8
SAMPLER_METHODS = ("auto", "rejection", "gibbs")
MOMENT_METHODS = ("analytic", "mc")

_TINY = np.finfo(float).tiny
_ONE_MINUS = 1.0 - 2.0**-53


@dataclass(frozen=True, eq=False)
class PdMatrix:
    """Symmetric positive-definite matrix together with its lower Cholesky factor.

    ``factor @ factor.T`` reproduces ``values + jitter_applied * I``.
    """

    values: np.ndarray
    factor: np.ndarray
    jitter_applied: float = 0.0
    name: str = "matrix"

    @property
    def dim(self) -> int:
        return int(self.values.shape[0])

    @property
    def effective(self) -> np.ndarray:
        """The matrix actually factorized (values plus jitter on the diagonal)."""
        if self.jitter_applied == 0.0:
            return self.values
        return self.values + self.jitter_applied * np.eye(self.dim)

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        return linalg.cho_solve((self.factor, True), rhs, check_finite=False)

    def inverse(self) -> np.ndarray:
        inv = self.solve(np.eye(self.dim))
        return 0.5 * (inv + inv.T)

    def logdet(self) -> float:
        return float(2.0 * np.sum(np.log(np.diag(self.factor))))


class CdfResult(NamedTuple):
    """Orthant probability and its error estimate."""

    value: float
    error: float


class LogCdfResult(NamedTuple):
    """Log orthant probability and the relative error of the probability."""

    log_value: float
    relative_error: float


class TmvnMoments(NamedTuple):
    mean: np.ndarray
    cov: np.ndarray


@dataclass
class SamplerDiagnostics:
    """Plain record describing how truncated-normal draws were produced."""

    method: str
    exact: bool
    n_draws: int
    region_probability: float
    acceptance_rate: Optional[float] = None
    proposals: Optional[int] = None
    n_chains: Optional[int] = None
    burn_in: Optional[int] = None
    thin: Optional[int] = None
    ess: Optional[float] = None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "method": self.method,
            "exact": self.exact,
            "n_draws": self.n_draws,
            "region_probability": self.region_probability,
            "acceptance_rate": self.acceptance_rate,
            "proposals": self.proposals,
            "n_chains": self.n_chains,
            "burn_in": self.burn_in,
            "thin": self.thin,
            "ess": self.ess,
        }


class TmvnSample(NamedTuple):
    draws: np.ndarray
    diagnostics: SamplerDiagnostics


def _jitter_ladder(max_jitter: float) -> List[float]:
    ladder = [0.0]
    jitter = 1e-12
    while jitter <= max_jitter * (1.0 + 1e-9):
        ladder.append(jitter)
        jitter *= 100.0
    return ladder


def chol_psd(
    matrix: Union[np.ndarray, Sequence[Sequence[float]]],
    max_jitter: float = DEFAULT_MAX_JITTER,
    name: str = "matrix",
) -> PdMatrix:
    """Cholesky-factorize a symmetric matrix, adding diagonal jitter if needed.

    The jitter ladder is 0, 1e-12, 1e-10, ... up to ``max_jitter``.

    Args:
        matrix: Square symmetric matrix
        max_jitter: Largest diagonal jitter tried
        name: Name used in log messages and errors

    Returns:
        Factorized matrix with the jitter that was applied

    Raises:
        MnprobitValidationError: If the input is not square, finite and symmetric
        MnprobitSingularityError: If factorization fails at ``max_jitter``
    """
    values = np.array(matrix, dtype=float, ndmin=2)
    if values.ndim != 2 or values.shape[0] != values.shape[1]:
        raise MnprobitValidationError(
            f"Matrix '{name}' must be square, got shape {values.shape}",
            context={"matrix": name},
        )
    if not np.all(np.isfinite(values)):
        raise MnprobitValidationError(
            f"Matrix '{name}' has non-finite entries", context={"matrix": name}
        )
    scale = max(1.0, float(np.max(np.abs(values)))) if values.size else 1.0
    asymmetry = float(np.max(np.abs(values - values.T))) if values.size else 0.0
    if asymmetry > 1e-10 * scale:
        raise MnprobitValidationError(
            f"Matrix '{name}' is not symmetric (max asymmetry {asymmetry:.3e})",
            context={"matrix": name},
        )
    values = 0.5 * (values + values.T)
    eye = np.eye(values.shape[0])

    for jitter in _jitter_ladder(max_jitter):
        try:
            factor = linalg.cholesky(values + jitter * eye, lower=True, check_finite=False)
        except linalg.LinAlgError:
            continue
        if not np.all(np.isfinite(factor)) or np.any(np.diag(factor) <= 0.0):
            continue
        if jitter > 0.0:
            logger.warning(f"Applied jitter {jitter:g} to factorize '{name}'")
        return PdMatrix(values=values, factor=factor, jitter_applied=jitter, name=name)

    raise MnprobitSingularityError(
        f"Matrix '{name}' is not positive definite even with jitter {max_jitter:g}",
        context={"matrix": name, "dim": values.shape[0]},
    )


def as_pd(matrix: Union[PdMatrix, np.ndarray], name: str = "matrix") -> PdMatrix:
    if isinstance(matrix, PdMatrix):
        return matrix
    return chol_psd(matrix, name=name)


def _bivariate_cdf(u: np.ndarray, cov: np.ndarray) -> CdfResult:
    # Plackett: d/dr Phi2(a, b; r) = phi2(a, b; r)
    sd = np.sqrt(np.diag(cov))
    a, b = u / sd
    rho = float(np.clip(cov[0, 1] / (sd[0] * sd[1]), -1.0, 1.0))
    if np.isposinf(a):
        return CdfResult(float(ndtr(b)), 0.0)
    if np.isposinf(b):
        return CdfResult(float(ndtr(a)), 0.0)
    if rho >= 1.0 - 1e-12:
        return CdfResult(float(ndtr(min(a, b))), 0.0)
    if rho <= -1.0 + 1e-12:
        return CdfResult(float(max(0.0, ndtr(a) + ndtr(b) - 1.0)), 0.0)

    def density(r: float) -> float:
        one_minus = 1.0 - r * r
        return math.exp(-(a * a - 2.0 * r * a * b + b * b) / (2.0 * one_minus)) / (
            2.0 * math.pi * math.sqrt(one_minus)
        )

    correction, err = integrate.quad(density, 0.0, rho, epsabs=1e-14, epsrel=1e-12, limit=200)
    value = float(ndtr(a) * ndtr(b) + correction)
    return CdfResult(min(max(value, 0.0), 1.0), float(abs(err)) + 1e-15)


def _genz_log_terms(u: np.ndarray, factor: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Log of the separation-of-variables integrand at each QMC point."""
    n_points = points.shape[0]
    h = u.shape[0]
    y = np.zeros((n_points, h - 1))
    t0 = u[0] / factor[0, 0]
    e = np.full(n_points, ndtr(t0))
    log_f = np.full(n_points, log_ndtr(t0))
    for i in range(1, h):
        arg = np.clip(points[:, i - 1] * e, _TINY, _ONE_MINUS)
        y[:, i - 1] = ndtri(arg)
        t = (u[i] - y[:, :i] @ factor[i, :i]) / factor[i, i]
        e = ndtr(t)
        log_f += log_ndtr(t)
    return log_f


def _genz_qmc(
    u: np.ndarray,
    pd: PdMatrix,
    tol: float,
    relative: bool,
    max_points_log2: int,
) -> LogCdfResult:
    h = u.shape[0]
    # most restrictive variables first; rounding keeps round-off in u from reordering ties
    scores = np.round(u / np.sqrt(np.diag(pd.effective)), QMC_ORDER_DECIMALS)
    order = np.argsort(scores, kind="stable")
    u_ord = u[order]
    factor = chol_psd(pd.effective[np.ix_(order, order)], name=pd.name).factor

    seeds = np.random.SeedSequence(QMC_SEED).spawn(QMC_RANDOMIZATIONS)
    log_value = -np.inf
    rel_err = np.inf
    for m in range(QMC_MIN_POINTS_LOG2, max_points_log2 + 1):
        estimates = np.empty(QMC_RANDOMIZATIONS)
        for r, seed in enumerate(seeds):
            engine = qmc.Sobol(d=h - 1, scramble=True, seed=np.random.default_rng(seed))
            points = engine.random_base2(m)
            log_f = _genz_log_terms(u_ord, factor, points)
            estimates[r] = logsumexp(log_f) - math.log(points.shape[0])
        log_value = float(logsumexp(estimates) - math.log(QMC_RANDOMIZATIONS))
        if not np.isfinite(log_value):
            return LogCdfResult(-np.inf, 0.0)
        ratios = np.exp(estimates - log_value)
        rel_err = 3.5 * float(np.std(ratios, ddof=1)) / math.sqrt(QMC_RANDOMIZATIONS)
        achieved = rel_err if relative else rel_err * math.exp(log_value)
        if achieved < tol:
            logger.debug(f"QMC orthant h={h}: {2**m} points x {QMC_RANDOMIZATIONS}")
            return LogCdfResult(log_value, rel_err)
    logger.debug(
        f"QMC orthant h={h} stopped at {2**max_points_log2} points, "
        f"relative error {rel_err:.2e} (tol {tol:g})"
    )
    return LogCdfResult(log_value, rel_err)


def _prepare_cdf_args(
    u: Union[np.ndarray, Sequence[float], float],
    W: Union[PdMatrix, np.ndarray],
    tol: float,
    max_dim: int,
) -> Tuple[np.ndarray, "PdMatrix"]:
    u_arr = np.atleast_1d(np.asarray(u, dtype=float))
    pd = as_pd(W, name="cdf covariance")
    h = u_arr.shape[0]
    if h < 1:
        raise MnprobitValidationError("CDF dimension must be at least 1")
    if pd.dim != h:
        raise MnprobitValidationError(
            f"CDF argument has length {h} but covariance is {pd.dim}x{pd.dim}"
        )
    if tol < 1e-10:
        raise MnprobitValidationError(f"CDF tolerance must be >= 1e-10, got {tol:g}")
    if h > max_dim:
        raise MnprobitCapacityError(
            f"CDF dimension {h} exceeds the configured cap {max_dim}",
            context={"module": "mvn_toolkit", "dim": h},
        )
    if np.any(np.isnan(u_arr)):
        raise MnprobitValidationError("CDF argument contains NaN")
    return u_arr, pd


def mvn_logcdf(
    u: Union[np.ndarray, Sequence[float], float],
    W: Union[PdMatrix, np.ndarray],
    tol: float = DEFAULT_CDF_TOL,
    max_dim: int = CDF_DIM_CAP,
    max_points_log2: int = QMC_MAX_POINTS_LOG2,
) -> LogCdfResult:
    """Log of P(Z <= u) for Z ~ N(0, W); ``tol`` bounds the relative error."""
    u_arr, pd = _prepare_cdf_args(u, W, tol, max_dim)
    if np.any(np.isneginf(u_arr)):
        return LogCdfResult(-np.inf, 0.0)
    finite = ~np.isposinf(u_arr)
    if not np.any(finite):
        return LogCdfResult(0.0, 0.0)
    if not np.all(finite):
        idx = np.flatnonzero(finite)
        sub = pd.effective[np.ix_(idx, idx)]
        return mvn_logcdf(u_arr[idx], sub, tol, max_dim, max_points_log2)

    h = u_arr.shape[0]
    if h == 1:
        return LogCdfResult(float(log_ndtr(u_arr[0] / math.sqrt(pd.effective[0, 0]))), 0.0)
    if h == 2:
        value, err = _bivariate_cdf(u_arr, pd.effective)
        if value <= 0.0:
            return LogCdfResult(-np.inf, 0.0)
        return LogCdfResult(math.log(value), err / value)
    return _genz_qmc(u_arr, pd, tol, relative=True, max_points_log2=max_points_log2)


def mvn_cdf(
    u: Union[np.ndarray, Sequence[float], float],
    W: Union[PdMatrix, np.ndarray],
    tol: float = DEFAULT_CDF_TOL,
    max_dim: int = CDF_DIM_CAP,
    max_points_log2: int = QMC_MAX_POINTS_LOG2,
) -> CdfResult:
    """Evaluate P(Z <= u) for Z ~ N(0, W).

    One- and two-dimensional cases are exact up to quadrature error. From three
    dimensions on, a randomized scrambled-Sobol separation-of-variables estimator
    with a fixed internal seed is used, doubling points until 3.5 standard errors
    across randomizations fall below ``tol``.

    Args:
        u: Upper integration limits (``+inf`` allowed)
        W: Covariance matrix or an already factorized ``PdMatrix``
        tol: Requested absolute error
        max_dim: Dimension cap
        max_points_log2: Log2 of the maximal QMC points per randomization

    Returns:
        ``(probability, error estimate)``

    Raises:
        MnprobitCapacityError: If the dimension exceeds ``max_dim``
        MnprobitSingularityError: If ``W`` is not positive definite after jitter
    """
    u_arr, pd = _prepare_cdf_args(u, W, tol, max_dim)
    if np.any(np.isneginf(u_arr)):
        return CdfResult(0.0, 0.0)
    finite = ~np.isposinf(u_arr)
    if not np.any(finite):
        return CdfResult(1.0, 0.0)
    if not np.all(finite):
        idx = np.flatnonzero(finite)
        sub = pd.effective[np.ix_(idx, idx)]
        return mvn_cdf(u_arr[idx], sub, tol, max_dim, max_points_log2)

    h = u_arr.shape[0]
    if h == 1:
        return CdfResult(float(ndtr(u_arr[0] / math.sqrt(pd.effective[0, 0]))), 0.0)
    if h == 2:
        return _bivariate_cdf(u_arr, pd.effective)
    log_value, rel_err = _genz_qmc(
        u_arr, pd, tol, relative=False, max_points_log2=max_points_log2
    )
    value = math.exp(log_value)
    return CdfResult(value, rel_err * value)


def independent_blocks(W: Union[PdMatrix, np.ndarray], rel_tol: float = 1e-10) -> List[np.ndarray]:
    """Index sets of the connected components of the correlation pattern of ``W``."""
    values = W.effective if isinstance(W, PdMatrix) else np.asarray(W, dtype=float)
    sd = np.sqrt(np.abs(np.diag(values)))
    with np.errstate(invalid="ignore", divide="ignore"):
        corr = np.abs(values) / np.outer(sd, sd)
    adjacency = sparse.csr_matrix(np.nan_to_num(corr) > rel_tol)
    n_comp, labels = csgraph.connected_components(adjacency, directed=False)
    return [np.flatnonzero(labels == c) for c in range(n_comp)]


def mvn_logcdf_factorized(
    u: Union[np.ndarray, Sequence[float], float],
    W: Union[PdMatrix, np.ndarray],
    tol: float = DEFAULT_CDF_TOL,
    max_dim: int = CDF_DIM_CAP,
) -> LogCdfResult:
    """Log orthant probability as a sum over independent blocks of ``W``.

    Correlations below 1e-10 in absolute value are treated as zero, so a block-diagonal
    covariance is integrated block by block in low dimension.
    """
    u_arr = np.atleast_1d(np.asarray(u, dtype=float))
    values = W.effective if isinstance(W, PdMatrix) else np.asarray(W, dtype=float)
    blocks = independent_blocks(values)
    if len(blocks) == 1:
        return mvn_logcdf(u_arr, W, tol, max_dim)
    total = 0.0
    rel_var = 0.0
    for idx in blocks:
        sub = values[np.ix_(idx, idx)]
        log_value, rel_err = mvn_logcdf(u_arr[idx], sub, tol, max_dim)
        if log_value == -np.inf:
            return LogCdfResult(-np.inf, 0.0)
        total += log_value
        rel_var += rel_err**2
    return LogCdfResult(total, math.sqrt(rel_var))


def mvn_sample(
    mean: Union[np.ndarray, Sequence[float]],
    cov: Union[PdMatrix, np.ndarray],
    count: int,
    rng: RngLike,
) -> np.ndarray:
    """Draw ``count`` rows from N(mean, cov) as ``mean + factor @ z``."""
    pd = as_pd(cov, name="sampling covariance")
    mean_arr = np.asarray(mean, dtype=float)
    if mean_arr.shape != (pd.dim,):
        raise MnprobitValidationError(
            f"Mean has shape {mean_arr.shape}, covariance is {pd.dim}x{pd.dim}"
        )
    z = make_rng(rng).standard_normal((int(count), pd.dim))
    return mean_arr + z @ pd.factor.T


@dataclass(frozen=True, eq=False)
class TruncatedMvn:
    """N(mean, cov) restricted to ``z >= lower`` componentwise (upper bounds are +inf)."""

    mean: np.ndarray
    cov: PdMatrix
    lower: np.ndarray = field(default=None)  # type: ignore[assignment]
    cdf_tol: float = DEFAULT_CDF_TOL

    def __post_init__(self) -> None:
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        object.__setattr__(self, "mean", mean)
        if not isinstance(self.cov, PdMatrix):
            object.__setattr__(self, "cov", chol_psd(self.cov, name="truncated covariance"))
        lower = np.zeros_like(mean) if self.lower is None else np.asarray(self.lower, float)
        object.__setattr__(self, "lower", np.atleast_1d(lower))
        if self.cov.dim != mean.shape[0] or self.lower.shape != mean.shape:
            raise MnprobitValidationError(
                "Truncated normal mean, covariance and bounds have inconsistent dimensions"
            )
        if np.any(np.isnan(self.lower)) or np.any(np.isposinf(self.lower)):
            raise MnprobitValidationError("Lower bounds must be finite or -inf")
        if not np.all(np.isfinite(mean)):
            raise MnprobitValidationError("Truncated normal mean must be finite")

    @property
    def dim(self) -> int:
        return int(self.mean.shape[0])

    @property
    def upper_limits(self) -> np.ndarray:
        """Limits ``mean - lower`` of the equivalent centred CDF (``+inf`` for open sides)."""
        with np.errstate(invalid="ignore"):
            return np.where(np.isneginf(self.lower), np.inf, self.mean - self.lower)

    @cached_property
    def log_region_probability(self) -> float:
        return mvn_logcdf(self.upper_limits, self.cov, tol=self.cdf_tol).log_value

    def acceptance_probability(self) -> float:
        """P(Z >= lower) under the untruncated normal."""
        return float(math.exp(self.log_region_probability))

    def check_region(self) -> None:
        if not self.log_region_probability > math.log(1e-300):
            raise MnprobitNumericError(
                "Truncation region has (numerically) zero probability",
                context={"module": "mvn_toolkit", "dim": self.dim},
            )

    def contains(self, draws: np.ndarray) -> np.ndarray:
        return np.all(draws >= self.lower, axis=-1)


def _rejection(
    t: TruncatedMvn, count: int, rng: np.random.Generator, acceptance: float
) -> TmvnSample:
    accepted: List[np.ndarray] = []
    n_accepted = 0
    proposals = 0
    row_cap = max(1, 20_000_000 // max(t.dim, 1))
    while n_accepted < count:
        remaining = count - n_accepted
        batch = int(min(row_cap, max(64, math.ceil(1.2 * remaining / max(acceptance, 1e-12)))))
        proposal = mvn_sample(t.mean, t.cov, batch, rng)
        proposals += batch
        keep = proposal[t.contains(proposal)]
        accepted.append(keep)
        n_accepted += keep.shape[0]
    draws = np.concatenate(accepted, axis=0)[:count]
    diagnostics = SamplerDiagnostics(
        method="rejection",
        exact=True,
        n_draws=count,
        region_probability=acceptance,
        acceptance_rate=n_accepted / proposals,
        proposals=proposals,
    )
    return TmvnSample(draws, diagnostics)


def _lag1_ess(chains: np.ndarray) -> float:
    """Effective-sample-size proxy from the mean lag-1 autocorrelation per chain."""
    n_keep, n_chains, _ = chains.shape
    if n_keep < 3:
        return float(n_keep * n_chains)
    centred = chains - chains.mean(axis=0, keepdims=True)
    var = np.sum(centred**2, axis=0)
    cov1 = np.sum(centred[1:] * centred[:-1], axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        rho = np.where(var > 0, cov1 / var, 0.0)
    rho_bar = float(np.clip(np.mean(rho), -0.99, 0.999))
    return float(n_keep * n_chains * (1.0 - rho_bar) / (1.0 + rho_bar))


def _gibbs(
    t: TruncatedMvn,
    count: int,
    rng: np.random.Generator,
    burn_in: int,
    thin: int,
    n_chains: int,
    acceptance: float,
) -> TmvnSample:
    h = t.dim
    precision = t.cov.inverse()
    q_diag = np.diag(precision)
    cond_sd = 1.0 / np.sqrt(q_diag)
    chains = max(1, min(n_chains, count))
    per_chain = math.ceil(count / chains)
    x = np.tile(np.maximum(t.mean, t.lower), (chains, 1))
    dev = x - t.mean
    kept = np.empty((per_chain, chains, h))

    def sweep() -> None:
        for j in range(h):
            r = dev @ precision[j] - q_diag[j] * dev[:, j]
            cond_mean = t.mean[j] - r / q_diag[j]
            a = (t.lower[j] - cond_mean) / cond_sd[j]
            tail = ndtr(-a)
            u = rng.random(chains)
            z = np.where(tail > 0.0, -ndtri(np.clip(u * tail, _TINY, _ONE_MINUS)), a)
            z = np.maximum(z, a)
            x[:, j] = cond_mean + cond_sd[j] * z
            dev[:, j] = x[:, j] - t.mean[j]

    for _ in range(burn_in):
        sweep()
    for k in range(per_chain):
        for _ in range(thin):
            sweep()
        kept[k] = x

    draws = kept.reshape(per_chain * chains, h)[:count]
    diagnostics = SamplerDiagnostics(
        method="gibbs",
        exact=False,
        n_draws=count,
        region_probability=acceptance,
        n_chains=chains,
        burn_in=burn_in,
        thin=thin,
        ess=_lag1_ess(kept),
    )
    return TmvnSample(draws, diagnostics)


def tmvn_sample(
    t: TruncatedMvn,
    count: int,
    rng: RngLike,
    method: str = "auto",
    burn_in: int = 500,
    thin: int = 5,
    n_chains: int = 16,
    min_acceptance: float = 0.01,
) -> TmvnSample:
    """Draw from a lower-truncated multivariate normal.

    ``rejection`` is exact. ``gibbs`` runs coordinate-wise Gibbs chains (vectorized
    in lockstep) and returns dependent but stationary draws. ``auto`` picks
    rejection when the acceptance probability is at least ``min_acceptance``.

    Args:
        t: Truncated normal to sample
        count: Number of draws
        rng: Seed or generator
        method: auto, rejection or gibbs
        burn_in: Gibbs sweeps discarded at the start
        thin: Gibbs sweeps between kept draws
        n_chains: Parallel Gibbs chains
        min_acceptance: Threshold used by ``auto``

    Returns:
        Draws of shape ``(count, h)`` and sampler diagnostics

    Raises:
        MnprobitInfeasibleMethodError: If rejection is requested with acceptance < 1e-12
    """
    if method not in SAMPLER_METHODS:
        raise MnprobitValidationError(
            f"Unknown truncated sampler '{method}', expected one of {SAMPLER_METHODS}"
        )
    if count < 1:
        raise MnprobitValidationError(f"Sample count must be positive, got {count}")
    t.check_region()
    generator = make_rng(rng)
    acceptance = t.acceptance_probability()

    if method == "rejection" and acceptance < 1e-12:
        raise MnprobitInfeasibleMethodError(
            f"Rejection sampling infeasible: acceptance probability {acceptance:.3e}",
            context={"module": "mvn_toolkit", "dim": t.dim},
        )
    if method == "auto":
        method = "rejection" if acceptance >= min_acceptance else "gibbs"
        if method == "gibbs":
            logger.warning(
                f"Acceptance {acceptance:.3e} below {min_acceptance:g}: "
                "falling back to Gibbs, draws are no longer i.i.d."
            )

    if method == "rejection":
        result = _rejection(t, count, generator, acceptance)
    else:
        result = _gibbs(t, count, generator, burn_in, thin, n_chains, acceptance)
    log_sampler_event(
        result.diagnostics.method,
        "sampled",
        {"dim": t.dim, "draws": count, "acceptance": f"{acceptance:.3e}"},
    )
    return result


def _analytic_moments(t: TruncatedMvn, tol: float) -> TmvnMoments:
    # Work with W = mean - X, which is N(0, S) truncated above at b = mean - lower.
    S = t.cov.effective
    h = t.dim
    b = t.upper_limits
    finite = np.isfinite(b)
    diag = np.diag(S)

    alpha = mvn_cdf(b, S, tol=tol).value
    if not alpha > 0.0:
        raise MnprobitNumericError(
            "Truncation region probability underflowed in moment computation",
            context={"module": "mvn_toolkit", "dim": h},
        )

    F1 = np.zeros(h)
    for k in np.flatnonzero(finite):
        dens = norm.pdf(b[k], scale=math.sqrt(diag[k]))
        if h == 1 or dens == 0.0:
            F1[k] = dens
            continue
        rest = np.delete(np.arange(h), k)
        s_rk = S[rest, k]
        cond_cov = S[np.ix_(rest, rest)] - np.outer(s_rk, s_rk) / diag[k]
        with np.errstate(invalid="ignore"):
            limits = b[rest] - s_rk * b[k] / diag[k]
        F1[k] = dens * mvn_cdf(limits, chol_psd(cond_cov, name="conditional covariance"), tol).value

    F2 = np.zeros((h, h))
    for k in range(h):
        for q in range(k + 1, h):
            if not (finite[k] and finite[q]):
                continue
            pair = np.array([k, q])
            S_pp = S[np.ix_(pair, pair)]
            dens = multivariate_normal.pdf(b[pair], mean=np.zeros(2), cov=S_pp)
            if h > 2 and dens > 0.0:
                rest = np.delete(np.arange(h), pair)
                S_rp = S[np.ix_(rest, pair)]
                gain = linalg.solve(S_pp, S_rp.T, assume_a="pos").T
                cond_cov = S[np.ix_(rest, rest)] - gain @ S_rp.T
                with np.errstate(invalid="ignore"):
                    limits = b[rest] - gain @ b[pair]
                dens *= mvn_cdf(
                    limits, chol_psd(0.5 * (cond_cov + cond_cov.T), name="conditional covariance"), tol
                ).value
            F2[k, q] = F2[q, k] = dens

    mean_w = -(S @ F1) / alpha
    bF = np.where(finite, np.where(finite, b, 0.0) * F1, 0.0)
    term1 = (S * (bF / diag)) @ S
    m1 = S @ F2.T
    m2 = np.sum(S * F2, axis=1)
    inner = m1 - S * (m2 / diag)[np.newaxis, :]
    term2 = S @ inner.T
    second = S + (term2 - term1) / alpha
    cov = second - np.outer(mean_w, mean_w)
    cov = 0.5 * (cov + cov.T)
    return TmvnMoments(t.mean - mean_w, cov)


def tmvn_moments(
    t: TruncatedMvn,
    method: str = "analytic",
    mc_draws: int = 10_000,
    rng: Optional[RngLike] = None,
    analytic_cap: int = ANALYTIC_MOMENT_CAP,
    tol: Optional[float] = None,
) -> TmvnMoments:
    """First and second moments of a lower-truncated multivariate normal.

    ``analytic`` uses the classical Tallis-type recursions expressing the moments
    through marginal densities and lower-dimensional CDFs; ``mc`` averages
    ``mc_draws`` draws from :func:`tmvn_sample`.

    Raises:
        MnprobitCapacityError: If ``method='analytic'`` and the dimension exceeds the cap
    """
    if method not in MOMENT_METHODS:
        raise MnprobitValidationError(
            f"Unknown moment method '{method}', expected one of {MOMENT_METHODS}"
        )
    t.check_region()
    if method == "analytic":
        if t.dim > analytic_cap:
            raise MnprobitCapacityError(
                f"Analytic truncated moments capped at dimension {analytic_cap}, got {t.dim}",
                recovery_hint="Use method='mc' for this dimension.",
                context={"module": "mvn_toolkit", "dim": t.dim},
            )
        return _analytic_moments(t, tol if tol is not None else t.cdf_tol)

    draws = tmvn_sample(t, mc_draws, rng if rng is not None else QMC_SEED).draws
    cov = np.atleast_2d(np.cov(draws, rowvar=False))
    return TmvnMoments(draws.mean(axis=0), 0.5 * (cov + cov.T))
