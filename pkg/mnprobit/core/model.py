"""Discrete-choice multinomial probit model.

Latent utilities ``z_il = x_i' beta_l + eps_il`` with ``eps_i ~ N(0, Sigma)`` and
``y_i = argmax_l z_il``. Class ``L`` is the reference class (``beta_L = 0``), so the
free parameter ``beta = (beta_1', ..., beta_{L-1}')'`` has length ``p(L-1)``.

Class labels are 1-based at the API boundary and 0-based inside arrays.
"""

from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.stats import norm

from ..utils.errors import MnprobitNumericError, MnprobitSingularityError, MnprobitValidationError
from ..utils.logging import get_logger
from ..utils.rng import make_rng
from .mvn import DEFAULT_CDF_TOL, PdMatrix, chol_psd, mvn_cdf, mvn_logcdf

logger = get_logger(__name__)

SIGMA_SYMMETRY_TOL = 1e-10
COVARIATE_SAMPLERS = ("normal", "intercept")


@dataclass(frozen=True, eq=False)
class Dataset:
    """Observed choices ``y`` (labels 1..L) and covariate rows ``X`` (n x p)."""

    y: np.ndarray
    X: np.ndarray
    n_classes: Optional[int] = None

    def __post_init__(self) -> None:
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X[:, np.newaxis]
        y_raw = np.asarray(self.y)
        if y_raw.ndim != 1:
            raise MnprobitValidationError(f"y must be a vector, got shape {y_raw.shape}")
        if y_raw.size and not np.all(np.equal(np.mod(y_raw, 1), 0)):
            raise MnprobitValidationError("Class labels must be integers")
        y = y_raw.astype(np.int64)
        if X.ndim != 2 or X.shape[0] != y.shape[0]:
            raise MnprobitValidationError(
                f"X must be n x p with n = len(y) = {y.shape[0]}, got shape {X.shape}"
            )
        n, p = X.shape
        if n < 1 or p < 1:
            raise MnprobitValidationError(f"Need n >= 1 and p >= 1, got n={n}, p={p}")
        if not np.all(np.isfinite(X)):
            raise MnprobitValidationError("Covariates contain non-finite entries")
        L = int(self.n_classes) if self.n_classes is not None else int(y.max())
        if L < 2:
            raise MnprobitValidationError(f"Need at least 2 classes, got L={L}")
        bad = np.flatnonzero((y < 1) | (y > L))
        if bad.size:
            raise MnprobitValidationError(
                f"Class label {int(y[bad[0]])} outside 1..{L}",
                context={"observation": int(bad[0]) + 1},
            )
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "n_classes", L)

    @property
    def n(self) -> int:
        return int(self.X.shape[0])

    @property
    def p(self) -> int:
        return int(self.X.shape[1])

    @property
    def L(self) -> int:  # noqa: N802
        return int(self.n_classes)  # type: ignore[arg-type]


@dataclass(frozen=True, eq=False)
class MnpModel:
    """Dataset, known utility-noise covariance Sigma and prior variance nu2."""

    data: Dataset
    sigma: Union[np.ndarray, PdMatrix]
    nu2: float

    def __post_init__(self) -> None:
        if not (np.isfinite(self.nu2) and self.nu2 > 0.0):
            raise MnprobitValidationError(f"Prior variance nu2 must be positive, got {self.nu2}")
        sigma = self.sigma if isinstance(self.sigma, PdMatrix) else validate_sigma(self.sigma)
        if sigma.dim != self.data.L:
            raise MnprobitValidationError(
                f"Sigma is {sigma.dim}x{sigma.dim} but the data have L={self.data.L} classes"
            )
        object.__setattr__(self, "sigma", sigma)
        object.__setattr__(self, "nu2", float(self.nu2))

    @property
    def sigma_pd(self) -> PdMatrix:
        return self.sigma  # type: ignore[return-value]

    @property
    def q(self) -> int:
        """Dimension p(L-1) of the free coefficient vector."""
        return self.data.p * (self.data.L - 1)

    @property
    def h(self) -> int:
        """Dimension n(L-1) of the stacked latent differences."""
        return self.data.n * (self.data.L - 1)


def validate_sigma(sigma: Union[np.ndarray, Sequence[Sequence[float]]]) -> PdMatrix:
    """Check Sigma for symmetry (1e-10) and positive definiteness, with no jitter."""
    values = np.asarray(sigma, dtype=float)
    if values.ndim != 2 or values.shape[0] != values.shape[1] or values.shape[0] < 2:
        raise MnprobitValidationError(f"Sigma must be an L x L matrix, got shape {values.shape}")
    if np.max(np.abs(values - values.T)) > SIGMA_SYMMETRY_TOL:
        raise MnprobitValidationError("Sigma is not symmetric", context={"matrix": "Sigma"})
    return chol_psd(values, max_jitter=0.0, name="Sigma")


@dataclass(frozen=True, eq=False)
class ContrastMatrix:
    """Rows ``(v_k - v_ell)'`` for ``k != ell`` and the same matrix without column L."""

    ell: int
    full: np.ndarray
    reduced: np.ndarray


def build_contrast(ell: int, L: int) -> ContrastMatrix:  # noqa: N803
    """Contrast matrix mapping utilities to differences against class ``ell`` (1-based)."""
    if L < 2:
        raise MnprobitValidationError(f"Need L >= 2, got {L}")
    if not 1 <= ell <= L:
        raise MnprobitValidationError(f"Class index {ell} outside 1..{L}")
    eye = np.eye(L)
    others = [k for k in range(L) if k != ell - 1]
    full = eye[others] - eye[ell - 1]
    return ContrastMatrix(ell=ell, full=full, reduced=full[:, : L - 1].copy())


def build_observation_design(
    x_i: Union[np.ndarray, Sequence[float]],
    y_i: int,
    L: int,  # noqa: N803
) -> np.ndarray:
    """Design block ``-Vbar_[-y_i] kron x_i'`` of shape (L-1) x p(L-1)."""
    x = np.atleast_1d(np.asarray(x_i, dtype=float))
    if x.ndim != 1 or not np.all(np.isfinite(x)):
        raise MnprobitValidationError("Covariate vector must be a finite 1-D array")
    return -np.kron(build_contrast(y_i, L).reduced, x[np.newaxis, :])


@dataclass(frozen=True, eq=False)
class DesignExpansion:
    """Stacked design X-bar and block-diagonal Lambda of the likelihood.

    ``lambda_blocks[i]`` is ``V_[-y_i] Sigma V_[-y_i]'``; the dense Lambda is only
    assembled on request.
    """

    xbar: np.ndarray
    lambda_blocks: np.ndarray
    block_size: int

    @property
    def n(self) -> int:
        return int(self.lambda_blocks.shape[0])

    @property
    def q(self) -> int:
        return int(self.xbar.shape[1])

    def xbar_block(self, i: int) -> np.ndarray:
        d = self.block_size
        return self.xbar[i * d : (i + 1) * d]

    def xbar_blocks(self) -> np.ndarray:
        """X-bar reshaped to (n, L-1, p(L-1))."""
        return self.xbar.reshape(self.n, self.block_size, self.q)

    @cached_property
    def lambda_factors(self) -> List[PdMatrix]:
        return [
            chol_psd(block, max_jitter=0.0, name=f"Lambda[{i + 1}]")
            for i, block in enumerate(self.lambda_blocks)
        ]

    def dense_lambda(self) -> np.ndarray:
        d = self.block_size
        dense = np.zeros((self.n * d, self.n * d))
        for i, block in enumerate(self.lambda_blocks):
            dense[i * d : (i + 1) * d, i * d : (i + 1) * d] = block
        return dense

    def latent_covariance(self, nu2: float) -> np.ndarray:
        """Lambda + nu2 X-bar X-bar', the marginal covariance of the latent differences."""
        cov = nu2 * (self.xbar @ self.xbar.T)
        d = self.block_size
        for i, block in enumerate(self.lambda_blocks):
            cov[i * d : (i + 1) * d, i * d : (i + 1) * d] += block
        return 0.5 * (cov + cov.T)


def build_design_expansion(model: MnpModel) -> DesignExpansion:
    """Assemble X-bar and the Lambda blocks observation by observation."""
    data = model.data
    L = data.L
    d = L - 1
    sigma = model.sigma_pd.values
    contrasts = {ell: build_contrast(ell, L) for ell in range(1, L + 1)}
    class_cov = {ell: c.full @ sigma @ c.full.T for ell, c in contrasts.items()}

    xbar = np.empty((data.n * d, model.q))
    blocks = np.empty((data.n, d, d))
    for i in range(data.n):
        ell = int(data.y[i])
        xbar[i * d : (i + 1) * d] = -np.kron(contrasts[ell].reduced, data.X[i][np.newaxis, :])
        blocks[i] = 0.5 * (class_cov[ell] + class_cov[ell].T)

    expansion = DesignExpansion(xbar=xbar, lambda_blocks=blocks, block_size=d)
    try:
        expansion.lambda_factors
    except MnprobitSingularityError as e:
        raise MnprobitSingularityError(
            "Sigma does not yield positive-definite contrast covariances",
            context={"module": "model_core", **e.context},
            cause=e,
        ) from e
    logger.debug(f"Design expansion: n={data.n}, L={L}, q={model.q}")
    return expansion


def _check_beta(beta: Union[np.ndarray, Sequence[float]], q: int) -> np.ndarray:
    b = np.atleast_1d(np.asarray(beta, dtype=float))
    if b.shape != (q,):
        raise MnprobitValidationError(f"beta must have length {q}, got shape {b.shape}")
    return b


def likelihood_factors(
    beta: Union[np.ndarray, Sequence[float]],
    expansion: DesignExpansion,
    tol: float = DEFAULT_CDF_TOL,
) -> np.ndarray:
    """Per-observation choice probabilities Phi_{L-1}(X-bar_[i] beta; Lambda_[ii])."""
    b = _check_beta(beta, expansion.q)
    return np.array(
        [
            mvn_cdf(expansion.xbar_block(i) @ b, expansion.lambda_factors[i], tol).value
            for i in range(expansion.n)
        ]
    )


def likelihood(
    beta: Union[np.ndarray, Sequence[float]],
    expansion: DesignExpansion,
    tol: float = DEFAULT_CDF_TOL,
) -> float:
    """Product of the per-observation orthant CDFs."""
    return float(np.prod(likelihood_factors(beta, expansion, tol)))


def log_likelihood(
    beta: Union[np.ndarray, Sequence[float]],
    expansion: DesignExpansion,
    tol: float = DEFAULT_CDF_TOL,
) -> float:
    """Sum of per-observation log-CDFs."""
    b = _check_beta(beta, expansion.q)
    total = 0.0
    for i in range(expansion.n):
        total += mvn_logcdf(expansion.xbar_block(i) @ b, expansion.lambda_factors[i], tol).log_value
    if np.isnan(total):
        raise MnprobitNumericError("Log-likelihood evaluation produced NaN")
    return float(total)


def log_prior(beta: Union[np.ndarray, Sequence[float]], nu2: float) -> float:
    """Log density of N(0, nu2 I) at beta."""
    b = np.atleast_1d(np.asarray(beta, dtype=float))
    return float(np.sum(norm.logpdf(b, scale=np.sqrt(nu2))))


def augment_beta(beta: Union[np.ndarray, Sequence[float]], p: int, L: int) -> np.ndarray:  # noqa: N803
    """Coefficients as an L x p matrix whose last (reference) row is zero."""
    b = _check_beta(beta, p * (L - 1))
    return np.vstack([b.reshape(L - 1, p), np.zeros((1, p))])


def _class_covariances(sigma: np.ndarray) -> List[Tuple[ContrastMatrix, PdMatrix]]:
    L = sigma.shape[0]
    out = []
    for ell in range(1, L + 1):
        contrast = build_contrast(ell, L)
        cov = contrast.full @ sigma @ contrast.full.T
        name = f"V[-{ell}] Sigma V[-{ell}]'"
        out.append((contrast, chol_psd(0.5 * (cov + cov.T), max_jitter=0.0, name=name)))
    return out


def class_probabilities(
    beta: Union[np.ndarray, Sequence[float]],
    x: Union[np.ndarray, Sequence[float]],
    sigma: Union[np.ndarray, PdMatrix],
    tol: float = DEFAULT_CDF_TOL,
) -> np.ndarray:
    """Probabilities of classes 1..L given covariates ``x``, coefficients ``beta`` and Sigma."""
    sigma_values = sigma.values if isinstance(sigma, PdMatrix) else np.asarray(sigma, dtype=float)
    L = sigma_values.shape[0]
    x_arr = np.atleast_1d(np.asarray(x, dtype=float))
    b = _check_beta(beta, x_arr.shape[0] * (L - 1))
    probs = np.empty(L)
    for ell, (contrast, cov) in enumerate(_class_covariances(sigma_values)):
        design = -np.kron(contrast.reduced, x_arr[np.newaxis, :])
        probs[ell] = mvn_cdf(design @ b, cov, tol).value
    return probs


def choice_probabilities(
    beta: Union[np.ndarray, Sequence[float]],
    x: Union[np.ndarray, Sequence[float]],
    model: MnpModel,
    tol: float = DEFAULT_CDF_TOL,
) -> np.ndarray:
    """Probability of each class 1..L for covariates ``x`` under coefficients ``beta``."""
    x_arr = np.atleast_1d(np.asarray(x, dtype=float))
    if x_arr.shape != (model.data.p,):
        raise MnprobitValidationError(
            f"Covariate vector must have length {model.data.p}, got {x_arr.shape}"
        )
    return class_probabilities(beta, x_arr, model.sigma_pd, tol)


def predictive_probabilities(
    samples: np.ndarray,
    X: np.ndarray,
    sigma: Union[np.ndarray, PdMatrix],
    tol: float = DEFAULT_CDF_TOL,
) -> np.ndarray:
    """Monte Carlo average of the class probabilities over coefficient draws.

    Args:
        samples: N x p(L-1) coefficient draws
        X: m x p covariate rows
        sigma: L x L utility-noise covariance
        tol: Orthant CDF tolerance

    Returns:
        m x L matrix; every draw's probability vector is renormalized to sum to 1
    """
    sigma_values = sigma.values if isinstance(sigma, PdMatrix) else np.asarray(sigma, dtype=float)
    L = sigma_values.shape[0]
    X = np.atleast_2d(np.asarray(X, dtype=float))
    p = X.shape[1]
    draws = np.atleast_2d(np.asarray(samples, dtype=float))
    if draws.shape[1] != p * (L - 1):
        raise MnprobitValidationError(
            f"Covariates have p={p} columns but draws have {draws.shape[1]} coefficients "
            f"(expected {p * (L - 1)} for L={L})"
        )
    classes = _class_covariances(sigma_values)
    out = np.zeros((X.shape[0], L))
    worst = 0.0
    for r, x in enumerate(X):
        designs = [-np.kron(contrast.reduced, x[np.newaxis, :]) for contrast, _ in classes]
        for b in draws:
            probs = np.array(
                [mvn_cdf(design @ b, cov, tol).value for design, (_, cov) in zip(designs, classes)]
            )
            total = probs.sum()
            worst = max(worst, abs(total - 1.0))
            out[r] += probs / total
    out /= draws.shape[0]
    logger.debug(f"Largest deviation of raw class probabilities from 1: {worst:.2e}")
    return out


@dataclass
class SimulationTruth:
    """Ground truth kept alongside a simulated dataset for oracle checks."""

    beta: np.ndarray
    utilities: np.ndarray
    seed: int
    covariates: str = "normal"
    extra: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "beta": self.beta.tolist(),
            "seed": self.seed,
            "covariates": self.covariates,
            "n": int(self.utilities.shape[0]),
            "L": int(self.utilities.shape[1]),
            "p": int(self.beta.shape[0] // max(self.utilities.shape[1] - 1, 1)),
            **self.extra,
        }


def simulate_dataset(
    beta_true: Union[np.ndarray, Sequence[float], str],
    n: int,
    p: int,
    sigma: Union[np.ndarray, Sequence[Sequence[float]]],
    nu2: float = 1.0,
    seed: int = 0,
    covariates: str = "normal",
) -> Tuple[Dataset, SimulationTruth]:
    """Simulate choices from the latent-utility model.

    Args:
        beta_true: Coefficient vector of length p(L-1), or ``"from-prior"`` to draw
            it from N(0, nu2 I)
        n: Number of observations
        p: Number of covariates
        sigma: L x L utility-noise covariance
        nu2: Prior variance (used only with ``"from-prior"``)
        seed: Random seed
        covariates: ``"normal"`` for i.i.d. N(0, 1) entries, ``"intercept"`` for a
            leading column of ones followed by N(0, 1) entries

    Returns:
        The dataset and the ground truth (beta, latent utilities, seed)
    """
    if n < 1 or p < 1:
        raise MnprobitValidationError(f"Need n >= 1 and p >= 1, got n={n}, p={p}")
    if covariates not in COVARIATE_SAMPLERS:
        raise MnprobitValidationError(
            f"Unknown covariate sampler '{covariates}', expected one of {COVARIATE_SAMPLERS}"
        )
    sigma_pd = validate_sigma(sigma)
    L = sigma_pd.dim
    rng = make_rng(seed)

    if isinstance(beta_true, str):
        if beta_true != "from-prior":
            raise MnprobitValidationError(f"Unknown beta specification '{beta_true}'")
        beta = rng.normal(scale=np.sqrt(nu2), size=p * (L - 1))
    else:
        beta = _check_beta(beta_true, p * (L - 1))

    X = rng.standard_normal((n, p))
    if covariates == "intercept":
        X[:, 0] = 1.0
    noise = rng.standard_normal((n, L)) @ sigma_pd.factor.T
    utilities = X @ augment_beta(beta, p, L).T + noise
    # argmax returns the lowest index on exact ties
    y = np.argmax(utilities, axis=1) + 1

    data = Dataset(y=y, X=X, n_classes=L)
    truth = SimulationTruth(beta=beta, utilities=utilities, seed=seed, covariates=covariates)
    logger.debug(f"Simulated dataset n={n}, p={p}, L={L}, seed={seed}")
    return data, truth
