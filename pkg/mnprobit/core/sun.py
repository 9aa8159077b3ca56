"""Unified skew-normal (SUN) distributions and the exact coefficient posterior.

Under a N(0, nu2 I) prior the posterior of beta is SUN with

    xi = 0,  Omega = nu2 I,  Delta = nu Xbar' s^-1,  gamma = 0,
    Gamma = s^-1 (nu2 Xbar Xbar' + Lambda) s^-1,

where ``s`` holds the square roots of the diagonal of ``nu2 Xbar Xbar' + Lambda``.
Draws are i.i.d. through the additive representation
``beta = xi + omega (V0 + Delta Gamma^-1 V1)`` with ``V0`` Gaussian and ``V1`` an
orthant-truncated Gaussian.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import cached_property
from typing import Any, Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.stats import multivariate_normal

from ..utils.errors import MnprobitNumericError, MnprobitSingularityError, MnprobitValidationError
from ..utils.logging import get_logger, log_sampler_event
from ..utils.rng import RngLike, spawn
from .draws import PosteriorDraws
from .model import DesignExpansion, MnpModel
from .mvn import (
    DEFAULT_CDF_TOL,
    DEFAULT_MAX_JITTER,
    PdMatrix,
    SamplerDiagnostics,
    TruncatedMvn,
    chol_psd,
    mvn_logcdf_factorized,
    mvn_sample,
    tmvn_sample,
)

logger = get_logger(__name__)

UNIT_DIAGONAL_TOL = 1e-12


class AdditiveFactors(NamedTuple):
    """Factorizations used by the additive sampler."""

    gamma: PdMatrix
    v0_cov: PdMatrix
    coupling: np.ndarray  # Delta Gamma^-1, q x h


@dataclass(frozen=True, eq=False)
class SunParams:
    """Parameters (xi, Omega, Delta, gamma, Gamma) of a SUN_{q,h} distribution."""

    xi: np.ndarray
    omega_mat: np.ndarray
    delta: np.ndarray
    gamma: np.ndarray
    gamma_mat: np.ndarray
    cdf_tol: float = DEFAULT_CDF_TOL
    max_jitter: float = DEFAULT_MAX_JITTER

    def __post_init__(self) -> None:
        xi = np.atleast_1d(np.asarray(self.xi, dtype=float))
        omega_mat = np.atleast_2d(np.asarray(self.omega_mat, dtype=float))
        gamma = np.atleast_1d(np.asarray(self.gamma, dtype=float))
        gamma_mat = np.atleast_2d(np.asarray(self.gamma_mat, dtype=float))
        delta = np.asarray(self.delta, dtype=float).reshape(xi.shape[0], gamma.shape[0])
        q, h = delta.shape
        if omega_mat.shape != (q, q) or gamma_mat.shape != (h, h):
            raise MnprobitValidationError(
                f"Inconsistent SUN dimensions: xi {xi.shape}, Omega {omega_mat.shape}, "
                f"Delta {delta.shape}, gamma {gamma.shape}, Gamma {gamma_mat.shape}"
            )
        if np.max(np.abs(np.diag(gamma_mat) - 1.0)) > UNIT_DIAGONAL_TOL:
            raise MnprobitValidationError("Gamma must be a correlation matrix (unit diagonal)")
        if np.any(np.diag(omega_mat) <= 0.0):
            raise MnprobitValidationError("Omega must have a positive diagonal")
        object.__setattr__(self, "xi", xi)
        object.__setattr__(self, "omega_mat", omega_mat)
        object.__setattr__(self, "delta", delta)
        object.__setattr__(self, "gamma", gamma)
        object.__setattr__(self, "gamma_mat", gamma_mat)
        try:
            self.additive_factors
        except MnprobitSingularityError as e:
            raise MnprobitSingularityError(
                f"Invalid SUN parameters: {e.message}",
                context={**e.context, "module": "sun_posterior"},
                cause=e,
            ) from e

    @property
    def q(self) -> int:
        return int(self.xi.shape[0])

    @property
    def h(self) -> int:
        return int(self.gamma.shape[0])

    @cached_property
    def omega_scale(self) -> np.ndarray:
        """Diagonal of omega = (Omega o I)^(1/2)."""
        return np.sqrt(np.diag(self.omega_mat))

    @cached_property
    def omega_bar(self) -> np.ndarray:
        corr = self.omega_mat / np.outer(self.omega_scale, self.omega_scale)
        return 0.5 * (corr + corr.T)

    @cached_property
    def omega_bar_pd(self) -> PdMatrix:
        return chol_psd(self.omega_bar, max_jitter=0.0, name="Omega_bar")

    @cached_property
    def gamma_pd(self) -> PdMatrix:
        return chol_psd(self.gamma_mat, max_jitter=self.max_jitter, name="Gamma")

    @cached_property
    def additive_factors(self) -> AdditiveFactors:
        """Cholesky factors of Gamma and of Omega_bar - Delta Gamma^-1 Delta'."""
        gamma_pd = self.gamma_pd
        coupling = gamma_pd.solve(self.delta.T).T
        v0 = self.omega_bar - coupling @ self.delta.T
        v0_pd = chol_psd(0.5 * (v0 + v0.T), max_jitter=self.max_jitter, name="V0 covariance")
        return AdditiveFactors(gamma=gamma_pd, v0_cov=v0_pd, coupling=coupling)

    @cached_property
    def log_normalizer(self) -> float:
        """log Phi_h(gamma; Gamma)."""
        return mvn_logcdf_factorized(self.gamma, self.gamma_pd, self.cdf_tol).log_value

    def jitter_record(self) -> Dict[str, float]:
        factors = self.additive_factors
        return {"gamma": factors.gamma.jitter_applied, "v0_cov": factors.v0_cov.jitter_applied}


def posterior_params(
    model: MnpModel,
    expansion: DesignExpansion,
    cdf_tol: float = DEFAULT_CDF_TOL,
    max_jitter: float = DEFAULT_MAX_JITTER,
) -> SunParams:
    """SUN parameters of the exact posterior of beta.

    Raises:
        MnprobitSingularityError: If Gamma or the V0 covariance cannot be factorized
    """
    nu2 = model.nu2
    nu = np.sqrt(nu2)
    latent_cov = expansion.latent_covariance(nu2)
    s = np.sqrt(np.diag(latent_cov))
    gamma_mat = latent_cov / np.outer(s, s)
    gamma_mat = 0.5 * (gamma_mat + gamma_mat.T)
    np.fill_diagonal(gamma_mat, 1.0)

    params = SunParams(
        xi=np.zeros(model.q),
        omega_mat=nu2 * np.eye(model.q),
        delta=nu * expansion.xbar.T / s[np.newaxis, :],
        gamma=np.zeros(expansion.xbar.shape[0]),
        gamma_mat=gamma_mat,
        cdf_tol=cdf_tol,
        max_jitter=max_jitter,
    )
    logger.debug(f"Posterior SUN parameters: q={params.q}, h={params.h}")
    return params


def sun_density(
    beta: Union[np.ndarray, Sequence[float], float],
    params: SunParams,
    log_scale: bool = False,
) -> float:
    """SUN density phi_q(beta - xi; Omega) Phi_h(.; Gamma - Delta' Omega_bar^-1 Delta) / Phi_h(gamma; Gamma)."""
    b = np.atleast_1d(np.asarray(beta, dtype=float))
    if b.shape != (params.q,):
        raise MnprobitValidationError(f"beta must have length {params.q}, got shape {b.shape}")
    centred = b - params.xi
    log_density = float(
        multivariate_normal.logpdf(centred, mean=np.zeros(params.q), cov=params.omega_mat)
    )
    if np.any(params.delta != 0.0):
        solved = params.omega_bar_pd.solve(params.delta)
        arg = params.gamma + solved.T @ (centred / params.omega_scale)
        cond_cov = params.gamma_mat - params.delta.T @ solved
        cond_cov = 0.5 * (cond_cov + cond_cov.T)
        cond_pd = chol_psd(cond_cov, max_jitter=params.max_jitter, name="conditional Gamma")
        log_density += mvn_logcdf_factorized(arg, cond_pd, params.cdf_tol).log_value
        log_density -= params.log_normalizer
    return log_density if log_scale else float(np.exp(log_density))


def log_evidence(
    model: MnpModel, expansion: DesignExpansion, tol: float = DEFAULT_CDF_TOL
) -> float:
    """log p(y) = log Phi_{n(L-1)}(0; Lambda + nu2 Xbar Xbar')."""
    latent_cov = chol_psd(
        expansion.latent_covariance(model.nu2), max_jitter=0.0, name="Lambda + nu2 Xbar Xbar'"
    )
    result = mvn_logcdf_factorized(np.zeros(latent_cov.dim), latent_cov, tol)
    if np.isnan(result.log_value):
        raise MnprobitNumericError(
            "Evidence evaluation produced NaN", context={"module": "sun_posterior"}
        )
    return float(result.log_value)


def evidence(model: MnpModel, expansion: DesignExpansion, tol: float = DEFAULT_CDF_TOL) -> float:
    """Marginal likelihood p(y); underflows to 0 for large n, prefer :func:`log_evidence`."""
    return float(np.exp(log_evidence(model, expansion, tol)))


def _shard_sizes(count: int, n_shards: int) -> List[int]:
    base, extra = divmod(count, n_shards)
    return [base + (1 if k < extra else 0) for k in range(n_shards)]


def _sample_shard(
    params: SunParams,
    count: int,
    rng: np.random.Generator,
    trunc_method: str,
    sampler_options: Dict[str, Any],
) -> Tuple[np.ndarray, np.ndarray, SamplerDiagnostics]:
    factors = params.additive_factors
    v0 = mvn_sample(np.zeros(params.q), factors.v0_cov, count, rng)
    truncated = TruncatedMvn(
        mean=np.zeros(params.h), cov=factors.gamma, lower=-params.gamma, cdf_tol=params.cdf_tol
    )
    v1, diagnostics = tmvn_sample(truncated, count, rng, method=trunc_method, **sampler_options)
    return v0, v1, diagnostics


def _merge_diagnostics(shards: List[SamplerDiagnostics], params: SunParams) -> Dict[str, Any]:
    methods = sorted({d.method for d in shards})
    merged: Dict[str, Any] = {
        "sampler": methods[0] if len(methods) == 1 else "mixed",
        "exact": all(d.exact for d in shards),
        "n_shards": len(shards),
        "truncation_dim": params.h,
        "region_probability": shards[0].region_probability,
        "jitter": params.jitter_record(),
    }
    proposals = [d.proposals for d in shards if d.proposals is not None]
    if proposals:
        merged["proposals"] = int(sum(proposals))
        merged["acceptance_rate"] = sum(d.n_draws for d in shards) / merged["proposals"]
    ess = [d.ess for d in shards if d.ess is not None]
    if ess:
        merged["ess"] = float(sum(ess))
        merged["burn_in"] = shards[0].burn_in
        merged["thin"] = shards[0].thin
    return merged


def sun_sample(
    params: SunParams,
    count: int,
    rng: RngLike,
    trunc_method: str = "auto",
    n_shards: int = 1,
    workers: Optional[int] = None,
    debug: bool = False,
    burn_in: int = 500,
    thin: int = 5,
    n_chains: int = 16,
    min_acceptance: float = 0.01,
) -> PosteriorDraws:
    """Draw from a SUN distribution with the additive representation.

    Each shard draws ``V0 ~ N_q(0, Omega_bar - Delta Gamma^-1 Delta')`` and then
    ``V1 ~ N_h(0, Gamma)`` truncated to ``V1 + gamma >= 0`` from its own substream,
    and combines them as ``xi + omega (V0 + Delta Gamma^-1 V1)``. Shards are
    concatenated in index order, so the output does not depend on ``workers``.

    Args:
        params: SUN parameters
        count: Number of draws
        rng: Integer seed, seed sequence or generator
        trunc_method: auto, rejection or gibbs
        n_shards: Number of independent substreams
        workers: Thread pool size for the shards (sequential when None)
        debug: Keep the V0 and V1 draws in ``components``
        burn_in: Gibbs burn-in sweeps
        thin: Gibbs thinning
        n_chains: Gibbs chains (one per shard when sharding)
        min_acceptance: Acceptance threshold used by ``auto``

    Returns:
        Posterior draws with merged sampler diagnostics
    """
    if count < 1:
        raise MnprobitValidationError(f"Sample count must be positive, got {count}")
    if n_shards < 1 or n_shards > count:
        raise MnprobitValidationError(f"Shard count must be in 1..{count}, got {n_shards}")

    sizes = _shard_sizes(count, n_shards)
    generators = spawn(rng, n_shards)
    sampler_options = {
        "burn_in": burn_in,
        "thin": thin,
        "n_chains": n_chains if n_shards == 1 else 1,
        "min_acceptance": min_acceptance,
    }
    # factorizations are cached before any worker thread touches them
    factors = params.additive_factors

    def run(k: int) -> Tuple[np.ndarray, np.ndarray, SamplerDiagnostics]:
        return _sample_shard(params, sizes[k], generators[k], trunc_method, sampler_options)

    if workers and workers > 1 and n_shards > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            results = list(executor.map(run, range(n_shards)))
    else:
        results = [run(k) for k in range(n_shards)]

    v0 = np.concatenate([r[0] for r in results], axis=0)
    v1 = np.concatenate([r[1] for r in results], axis=0)
    samples = params.xi + params.omega_scale * (v0 + v1 @ factors.coupling.T)

    diagnostics = _merge_diagnostics([r[2] for r in results], params)
    if not diagnostics["exact"]:
        logger.warning("Exact posterior draws came from Gibbs chains and are not i.i.d.")
    log_sampler_event(diagnostics["sampler"], "posterior draws", {"count": count, "shards": n_shards})

    draws = PosteriorDraws(
        samples=samples,
        seed=rng if isinstance(rng, int) else None,
        sampler_diag=diagnostics,
        source="exact",
    )
    if debug:
        draws.components = {"v0": v0, "v1": v1}
    return draws
