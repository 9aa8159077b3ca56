"""Partially-factorized blocked mean-field (PFM-B) variational approximation.

The approximating family keeps ``q(beta | zbar)`` exact and factorizes the
truncated latent differences into independent blocks ``q(zbar_i)`` of size L-1.
Coordinate ascent (CAVI) updates each block to the orthant-truncated normal
``TN(mu_i, Sigma_i*)`` with

    Sigma_i* = (Lambda_ii^-1 - H_ii)^-1,   mu_i = Sigma_i* sum_{j != i} H_ij m_j,

where ``H = Lambda^-1 Xbar V Xbar' Lambda^-1`` and
``V = (nu^-2 I + Xbar' Lambda^-1 Xbar)^-1``.
"""

import math
from dataclasses import dataclass, field
from typing import Any, List, Optional, Sequence, Tuple, Union

import numpy as np

from ..utils.errors import (
    MnprobitConvergenceError,
    MnprobitError,
    MnprobitSingularityError,
    MnprobitValidationError,
)
from ..utils.logging import get_logger, log_cavi_progress
from ..utils.rng import RngLike, child_sequences, make_rng, spawn
from .draws import PosteriorDraws
from .model import DesignExpansion, MnpModel, build_design_expansion
from .mvn import (
    ANALYTIC_MOMENT_CAP,
    DEFAULT_CDF_TOL,
    MOMENT_METHODS,
    PdMatrix,
    TruncatedMvn,
    chol_psd,
    mvn_logcdf,
    mvn_sample,
    tmvn_moments,
    tmvn_sample,
)

logger = get_logger(__name__)

INIT_POLICIES = ("default", "ones")
SWEEP_ORDERS = ("forward", "reverse")
_LOG_2PI = math.log(2.0 * math.pi)

InitSpec = Union[str, np.ndarray, Sequence[Sequence[float]]]


@dataclass(frozen=True, eq=False)
class PfmPrecomp:
    """Quantities fixed across CAVI sweeps.

    ``b_blocks[i]`` is ``Lambda_ii^-1 Xbar_i`` and ``a = V Xbar' Lambda^-1`` (q x n(L-1));
    ``h_blocks[i, j]`` is the (L-1) x (L-1) block ``H_ij``.
    """

    v: np.ndarray
    precision: PdMatrix
    a: np.ndarray
    b_blocks: np.ndarray
    h_blocks: np.ndarray
    lambda_inv_blocks: np.ndarray
    sigma_star: List[PdMatrix]
    sigma_star_inv: np.ndarray
    nu2: float

    @property
    def n(self) -> int:
        return int(self.h_blocks.shape[0])

    @property
    def block_size(self) -> int:
        return int(self.h_blocks.shape[2])

    @property
    def q(self) -> int:
        return int(self.v.shape[0])

    def a_blocks(self) -> np.ndarray:
        """A split into its n blocks of shape q x (L-1)."""
        return self.a.reshape(self.q, self.n, self.block_size).transpose(1, 0, 2)


@dataclass(eq=False)
class PfmState:
    """Current block means ``m`` (n x (L-1)) with the truncated-normal parameters behind them."""

    m: np.ndarray
    sweep_count: int = 0
    converged: bool = False
    last_delta: float = math.inf
    mu: Optional[np.ndarray] = None
    cov: Optional[np.ndarray] = None
    elbo_trace: List[float] = field(default_factory=list)

    @property
    def has_moments(self) -> bool:
        return self.mu is not None and self.cov is not None


@dataclass(eq=False)
class VbPosterior:
    """Converged (or explicitly flagged) PFM-B approximation."""

    precomp: PfmPrecomp
    state: PfmState
    z_cov_blocks: np.ndarray
    eps: float = 1e-8
    seed: Optional[int] = None

    @property
    def converged(self) -> bool:
        return self.state.converged


def precompute(model: MnpModel, expansion: DesignExpansion) -> PfmPrecomp:
    """Factorize V, form A and the H blocks, and factorize every Sigma_i*.

    Raises:
        MnprobitSingularityError: If some ``Lambda_ii^-1 - H_ii`` is not positive
            definite; the context names the observation
    """
    n, d, q = expansion.n, expansion.block_size, expansion.q
    xbar_blocks = expansion.xbar_blocks()
    lambda_inv = np.stack([pd.inverse() for pd in expansion.lambda_factors])
    b_blocks = np.einsum("iab,ibq->iaq", lambda_inv, xbar_blocks)

    precision_mat = np.eye(q) / model.nu2 + np.einsum("iaq,iar->qr", xbar_blocks, b_blocks)
    precision = chol_psd(0.5 * (precision_mat + precision_mat.T), name="V^-1")
    v = precision.inverse()

    b_stacked = b_blocks.reshape(n * d, q)
    a = v @ b_stacked.T
    h_full = b_stacked @ a
    h_blocks = h_full.reshape(n, d, n, d).transpose(0, 2, 1, 3).copy()

    sigma_star: List[PdMatrix] = []
    sigma_star_inv = np.empty((n, d, d))
    for i in range(n):
        inv = lambda_inv[i] - h_blocks[i, i]
        inv = 0.5 * (inv + inv.T)
        try:
            inv_pd = chol_psd(inv, name=f"Sigma*[{i + 1}]^-1")
            star = inv_pd.inverse()
            sigma_star.append(chol_psd(star, name=f"Sigma*[{i + 1}]"))
        except MnprobitSingularityError as e:
            raise MnprobitSingularityError(
                f"Lambda_ii^-1 - H_ii is not positive definite for observation {i + 1}",
                context={"module": "pfm_vb", "observation": i + 1},
                cause=e,
            ) from e
        sigma_star_inv[i] = inv

    logger.debug(f"PFM-B precomputation: n={n}, block={d}, q={q}")
    return PfmPrecomp(
        v=v,
        precision=precision,
        a=a,
        b_blocks=b_blocks,
        h_blocks=h_blocks,
        lambda_inv_blocks=lambda_inv,
        sigma_star=sigma_star,
        sigma_star_inv=sigma_star_inv,
        nu2=model.nu2,
    )


def woodbury_residual(precomp: PfmPrecomp, expansion: DesignExpansion, nu2: float) -> float:
    """Max-norm of (Lambda + nu2 Xbar Xbar')(Lambda^-1 - H) - I."""
    n, d = precomp.n, precomp.block_size
    lambda_inv = np.zeros((n * d, n * d))
    for i in range(n):
        lambda_inv[i * d : (i + 1) * d, i * d : (i + 1) * d] = precomp.lambda_inv_blocks[i]
    h_full = precomp.h_blocks.transpose(0, 2, 1, 3).reshape(n * d, n * d)
    product = expansion.latent_covariance(nu2) @ (lambda_inv - h_full)
    return float(np.max(np.abs(product - np.eye(n * d))))


def resolve_moment_method(moment_method: Optional[str], block_size: int) -> str:
    """Analytic truncated moments up to the cap, Monte Carlo above, unless explicitly chosen."""
    if moment_method is None:
        return "analytic" if block_size <= ANALYTIC_MOMENT_CAP else "mc"
    if moment_method not in MOMENT_METHODS:
        raise MnprobitValidationError(
            f"Unknown moment method '{moment_method}', expected one of {MOMENT_METHODS}"
        )
    return moment_method


def initial_state(precomp: PfmPrecomp, expansion: DesignExpansion, init: InitSpec = "default") -> PfmState:
    """Starting block means.

    ``default`` uses sqrt(2/pi) * sqrt(diag Lambda_ii), ``ones`` sets every entry to 1,
    and an explicit n x (L-1) array resumes from a stored state.
    """
    n, d = precomp.n, precomp.block_size
    if isinstance(init, str):
        if init == "default":
            diag = np.diagonal(expansion.lambda_blocks, axis1=1, axis2=2)
            m = math.sqrt(2.0 / math.pi) * np.sqrt(diag)
        elif init == "ones":
            m = np.ones((n, d))
        else:
            raise MnprobitValidationError(
                f"Unknown init policy '{init}', expected one of {INIT_POLICIES} or explicit means"
            )
    else:
        m = np.asarray(init, dtype=float)
        if m.shape != (n, d):
            raise MnprobitValidationError(
                f"Initial means must have shape {(n, d)}, got {m.shape}"
            )
        if not np.all(np.isfinite(m)) or np.any(m <= 0.0):
            raise MnprobitValidationError("Initial block means must be finite and positive")
    return PfmState(m=np.array(m, dtype=float))


def _block_moments(
    mu: np.ndarray,
    sigma: PdMatrix,
    moment_method: str,
    seed_seq: Optional[np.random.SeedSequence],
    mc_draws: int,
    cdf_tol: float,
) -> Tuple[np.ndarray, np.ndarray]:
    t = TruncatedMvn(mean=mu, cov=sigma, cdf_tol=cdf_tol)
    if moment_method == "analytic":
        return tmvn_moments(t, method="analytic")
    # the same substream every sweep keeps the update a deterministic map of mu
    return tmvn_moments(t, method="mc", mc_draws=mc_draws, rng=make_rng(seed_seq))


def cavi_sweep(
    state: PfmState,
    precomp: PfmPrecomp,
    moment_method: Optional[str] = None,
    order: str = "forward",
    seed: Optional[Union[int, np.random.SeedSequence]] = None,
    mc_draws: int = 10_000,
    cdf_tol: float = DEFAULT_CDF_TOL,
) -> PfmState:
    """One coordinate-ascent pass over the blocks.

    Each block reads the freshest neighbour means: blocks already visited in this
    sweep contribute their new values. The input state is not modified.
    """
    if order not in SWEEP_ORDERS:
        raise MnprobitValidationError(f"Unknown sweep order '{order}', expected {SWEEP_ORDERS}")
    n, d = precomp.n, precomp.block_size
    if state.m.shape != (n, d):
        raise MnprobitValidationError(
            f"State has shape {state.m.shape}, precomputation expects {(n, d)}"
        )
    method = resolve_moment_method(moment_method, d)
    seed_seqs: List[Optional[np.random.SeedSequence]] = [None] * n
    if method == "mc":
        if seed is None:
            raise MnprobitValidationError("Monte Carlo truncated moments need a seed")
        seed_seqs = list(child_sequences(seed, n))

    m = state.m.copy()
    mu = np.zeros((n, d)) if state.mu is None else state.mu.copy()
    cov = np.zeros((n, d, d)) if state.cov is None else state.cov.copy()
    indices = range(n) if order == "forward" else range(n - 1, -1, -1)
    for i in indices:
        others = np.arange(n) != i
        neighbours = np.einsum("jab,jb->a", precomp.h_blocks[i, others], m[others])
        mu[i] = precomp.sigma_star[i].values @ neighbours
        try:
            m[i], cov[i] = _block_moments(
                mu[i], precomp.sigma_star[i], method, seed_seqs[i], mc_draws, cdf_tol
            )
        except MnprobitError as e:
            e.context.setdefault("module", "pfm_vb")
            e.context["observation"] = i + 1
            raise

    delta = float(np.max(np.abs(m - state.m)))
    return PfmState(
        m=m,
        sweep_count=state.sweep_count + 1,
        converged=False,
        last_delta=delta,
        mu=mu,
        cov=cov,
        elbo_trace=list(state.elbo_trace),
    )


def elbo(
    vb_state: PfmState,
    precomp: PfmPrecomp,
    expansion: DesignExpansion,
    model: MnpModel,
    tol: float = DEFAULT_CDF_TOL,
) -> float:
    """Evidence lower bound of the blocked approximation.

    ``E_q[log phi(zbar; 0, Lambda + nu2 Xbar Xbar')] + sum_i H[q(zbar_i)]``, which equals
    ``log p(y) - KL[q || p(zbar | y)]``.
    """
    if not vb_state.has_moments:
        raise MnprobitValidationError("ELBO needs a state produced by at least one CAVI sweep")
    n, d, q = precomp.n, precomp.block_size, precomp.q
    m, mu, cov = vb_state.m, vb_state.mu, vb_state.cov
    assert mu is not None and cov is not None

    logdet_lambda = sum(pd.logdet() for pd in expansion.lambda_factors)
    logdet_latent = logdet_lambda + q * math.log(model.nu2) + precomp.precision.logdet()
    w = np.einsum("iaq,ia->q", precomp.b_blocks, m)
    quad = (
        np.einsum("ia,iab,ib->", m, precomp.lambda_inv_blocks, m)
        - w @ precomp.v @ w
        + np.einsum("iab,iba->", precomp.sigma_star_inv, cov)
    )
    expected_log_density = -0.5 * (n * d * _LOG_2PI + logdet_latent + quad)

    entropy = 0.0
    for i in range(n):
        star = precomp.sigma_star[i]
        offset = m[i] - mu[i]
        second = cov[i] + np.outer(offset, offset)
        log_norm = mvn_logcdf(mu[i], star, tol).log_value
        entropy += (
            log_norm
            + 0.5 * d * _LOG_2PI
            + 0.5 * star.logdet()
            + 0.5 * float(np.sum(precomp.sigma_star_inv[i] * second))
        )
    return float(expected_log_density + entropy)


def run_cavi(
    model: MnpModel,
    eps: float = 1e-8,
    max_sweeps: int = 1000,
    init: InitSpec = "default",
    moment_method: Optional[str] = None,
    expansion: Optional[DesignExpansion] = None,
    order: str = "forward",
    seed: Optional[int] = None,
    mc_draws: int = 10_000,
    track_elbo: bool = True,
    cdf_tol: float = DEFAULT_CDF_TOL,
) -> VbPosterior:
    """Run CAVI sweeps until the largest change in the block means drops below ``eps``.

    Args:
        model: Model with data, Sigma and nu2
        eps: Convergence threshold on max |m_new - m_old|
        max_sweeps: Sweep budget
        init: ``default``, ``ones`` or explicit starting means
        moment_method: ``analytic`` or ``mc`` (chosen from the block size when None)
        expansion: Prebuilt design expansion
        order: ``forward`` (1..n) or ``reverse`` (n..1)
        seed: Seed for Monte Carlo moments
        mc_draws: Draws per block for Monte Carlo moments
        track_elbo: Record the ELBO after every sweep
        cdf_tol: Tolerance of the orthant CDFs

    Returns:
        The approximation; ``converged`` is False if the sweep budget ran out
    """
    if not eps > 0.0:
        raise MnprobitValidationError(f"eps must be positive, got {eps}")
    if max_sweeps < 1:
        raise MnprobitValidationError(f"max_sweeps must be positive, got {max_sweeps}")
    expansion = expansion if expansion is not None else build_design_expansion(model)
    precomp = precompute(model, expansion)
    state = initial_state(precomp, expansion, init)

    while state.sweep_count < max_sweeps:
        state = cavi_sweep(state, precomp, moment_method, order, seed, mc_draws, cdf_tol)
        value = elbo(state, precomp, expansion, model, cdf_tol) if track_elbo else None
        if value is not None:
            state.elbo_trace.append(value)
        log_cavi_progress(state.sweep_count, state.last_delta, value)
        if state.last_delta < eps:
            state.converged = True
            break

    if state.converged:
        logger.info(f"CAVI converged after {state.sweep_count} sweeps (delta {state.last_delta:.2e})")
    else:
        logger.warning(
            f"CAVI did not converge in {max_sweeps} sweeps (last delta {state.last_delta:.2e})"
        )
    assert state.cov is not None
    return VbPosterior(precomp=precomp, state=state, z_cov_blocks=state.cov, eps=eps, seed=seed)


def _require_converged(vb: VbPosterior, allow_unconverged: bool) -> None:
    if not vb.converged and not allow_unconverged:
        raise MnprobitConvergenceError(
            f"Variational state did not converge (last delta {vb.state.last_delta:.2e} after "
            f"{vb.state.sweep_count} sweeps)",
            context={"module": "pfm_vb", "sweeps": vb.state.sweep_count},
        )


def vb_beta_moments(
    vb: VbPosterior, allow_unconverged: bool = False
) -> Tuple[np.ndarray, np.ndarray]:
    """E[beta] = A m and var(beta) = V + A blockdiag(C_i) A' under the approximation."""
    _require_converged(vb, allow_unconverged)
    precomp = vb.precomp
    mean = precomp.a @ vb.state.m.reshape(-1)
    a_blocks = precomp.a_blocks()
    spread = np.einsum("iqa,iab,irb->qr", a_blocks, vb.z_cov_blocks, a_blocks)
    cov = precomp.v + spread
    return mean, 0.5 * (cov + cov.T)


def vb_sample_beta(
    vb: VbPosterior,
    count: int,
    rng: RngLike,
    trunc_method: str = "auto",
    allow_unconverged: bool = False,
    **sampler_options: Any,
) -> PosteriorDraws:
    """Draw zbar_i ~ TN(mu_i, Sigma_i*) independently per block, then beta ~ N(A zbar, V)."""
    _require_converged(vb, allow_unconverged)
    if count < 1:
        raise MnprobitValidationError(f"Sample count must be positive, got {count}")
    precomp = vb.precomp
    n, d = precomp.n, precomp.block_size
    mu = vb.state.mu
    assert mu is not None
    generators = spawn(rng, n + 1)

    z = np.empty((count, n, d))
    methods = set()
    for i in range(n):
        t = TruncatedMvn(mean=mu[i], cov=precomp.sigma_star[i])
        sample = tmvn_sample(t, count, generators[i], method=trunc_method, **sampler_options)
        z[:, i, :] = sample.draws
        methods.add(sample.diagnostics.method)

    noise = mvn_sample(np.zeros(precomp.q), precomp.v, count, generators[n])
    samples = z.reshape(count, n * d) @ precomp.a.T + noise
    diagnostics = {
        "sampler": methods.pop() if len(methods) == 1 else "mixed",
        "blocks": n,
        "block_size": d,
        "converged": vb.converged,
        "sweeps": vb.state.sweep_count,
    }
    return PosteriorDraws(
        samples=samples,
        seed=rng if isinstance(rng, int) else None,
        sampler_diag=diagnostics,
        source="vb",
    )

