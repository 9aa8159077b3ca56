import math

import numpy as np
import pytest
from scipy.stats import multivariate_normal

from mnprobit.core.mvn import (
    TruncatedMvn,
    chol_psd,
    independent_blocks,
    mvn_cdf,
    mvn_logcdf,
    mvn_logcdf_factorized,
    mvn_sample,
    tmvn_moments,
    tmvn_sample,
)
from mnprobit.utils.errors import (
    MnprobitCapacityError,
    MnprobitInfeasibleMethodError,
    MnprobitSingularityError,
    MnprobitValidationError,
)

HALF_NORMAL_MEAN = math.sqrt(2.0 / math.pi)
HALF_NORMAL_VAR = 1.0 - 2.0 / math.pi


def equicorrelated(h: int, rho: float) -> np.ndarray:
    return (1 - rho) * np.eye(h) + rho * np.ones((h, h))


def test_orthant_probabilities():
    assert mvn_cdf([0.0, 0.0], np.eye(2)).value == pytest.approx(0.25, abs=1e-10)
    assert mvn_cdf([0.0, 0.0], equicorrelated(2, 0.5)).value == pytest.approx(1 / 3, abs=1e-10)
    assert mvn_cdf(np.zeros(3), equicorrelated(3, 0.5)).value == pytest.approx(0.25, abs=1e-5)
    assert mvn_cdf(np.zeros(4), equicorrelated(4, 0.5)).value == pytest.approx(0.2, abs=1e-5)


def test_cdf_infinite_limits():
    assert mvn_cdf([np.inf, np.inf], np.eye(2)).value == 1.0
    assert mvn_cdf([-np.inf, 0.0], np.eye(2)).value == 0.0
    assert mvn_cdf([np.inf, 0.0, np.inf], equicorrelated(3, 0.3)).value == pytest.approx(0.5)


def test_cdf_matches_scipy_in_three_dimensions():
    cov = np.array([[1.0, 0.4, -0.2], [0.4, 2.0, 0.5], [-0.2, 0.5, 1.5]])
    u = np.array([0.3, -0.5, 1.1])
    expected = multivariate_normal(mean=np.zeros(3), cov=cov).cdf(u)
    result = mvn_cdf(u, cov, tol=1e-6)
    assert result.value == pytest.approx(expected, abs=1e-4)


def test_cdf_is_deterministic_and_monotone():
    rng = np.random.default_rng(0)
    cov = equicorrelated(4, 0.3)
    for _ in range(10):
        u = rng.standard_normal(4)
        bigger = u + np.abs(rng.standard_normal(4))
        assert mvn_cdf(u, cov).value == mvn_cdf(u, cov).value
        assert mvn_cdf(u, cov).value <= mvn_cdf(bigger, cov).value + 1e-5


def test_cdf_ignores_round_off_in_tied_limits():
    cov = np.array([[1.0, 0.2, 0.1], [0.2, 1.3, -0.3], [0.1, -0.3, 0.8]])
    base = mvn_cdf(np.zeros(3), cov).value
    for noise in ([-7e-16, -4.6e-16, -4.1e-16], [3e-16, -2e-16, 1e-16]):
        assert mvn_cdf(np.array(noise), cov).value == pytest.approx(base, abs=1e-12)
    shifted = np.array([0.5, 0.5, 0.5]) * np.sqrt(np.diag(cov))
    moved = shifted + np.array([1e-15, -1e-15, 0.0])
    assert mvn_cdf(moved, cov).value == pytest.approx(mvn_cdf(shifted, cov).value, abs=1e-12)


def test_logcdf_deep_tail():
    result = mvn_logcdf([-12.0], np.eye(1))
    assert np.isfinite(result.log_value)
    assert result.log_value < -70


def test_cdf_argument_errors():
    with pytest.raises(MnprobitValidationError):
        mvn_cdf([0.0, 0.0], np.eye(3))
    with pytest.raises(MnprobitValidationError):
        mvn_cdf([0.0], np.eye(1), tol=1e-12)
    with pytest.raises(MnprobitCapacityError):
        mvn_cdf(np.zeros(3), np.eye(3), max_dim=2)


def test_factorized_logcdf_sums_blocks():
    W = np.zeros((4, 4))
    W[:2, :2] = equicorrelated(2, 0.5)
    W[2:, 2:] = equicorrelated(2, -0.3)
    blocks = independent_blocks(W)
    assert [list(b) for b in blocks] == [[0, 1], [2, 3]]
    u = np.array([0.2, -0.1, 0.5, 0.0])
    expected = mvn_logcdf(u[:2], W[:2, :2]).log_value + mvn_logcdf(u[2:], W[2:, 2:]).log_value
    assert mvn_logcdf_factorized(u, W).log_value == pytest.approx(expected, abs=1e-12)


def test_chol_psd_identity():
    pd = chol_psd(np.eye(3))
    np.testing.assert_array_equal(pd.factor, np.eye(3))
    assert pd.jitter_applied == 0.0


def test_chol_psd_rank_one_needs_jitter():
    pd = chol_psd([[1.0, 1.0], [1.0, 1.0]])
    assert 0.0 < pd.jitter_applied <= 1e-6
    np.testing.assert_allclose(pd.factor @ pd.factor.T, pd.effective)


def test_chol_psd_errors():
    with pytest.raises(MnprobitValidationError):
        chol_psd([[1.0, 0.5], [0.0, 1.0]])
    with pytest.raises(MnprobitSingularityError, match="Sigma"):
        chol_psd([[1.0, 2.0], [2.0, 1.0]], name="Sigma")


def test_mvn_sample_moments_and_determinism():
    count = 100_000
    draws = mvn_sample(np.zeros(3), np.eye(3), count, 42)
    assert np.all(np.abs(draws.mean(axis=0)) < 3 / math.sqrt(count) * 1.5)
    np.testing.assert_array_equal(draws, mvn_sample(np.zeros(3), np.eye(3), count, 42))


def test_mvn_sample_singular_covariance_stays_near_column_space():
    draws = mvn_sample(np.zeros(2), np.array([[1.0, 1.0], [1.0, 1.0]]), 1000, 1)
    assert np.max(np.abs(draws[:, 0] - draws[:, 1])) < 1e-3


def test_truncated_half_normal_sampling():
    count = 50_000
    t = TruncatedMvn(mean=np.zeros(1), cov=np.eye(1))
    sample = tmvn_sample(t, count, 7, method="rejection")
    assert sample.diagnostics.exact
    assert np.all(sample.draws >= 0.0)
    se = math.sqrt(HALF_NORMAL_VAR / count)
    assert abs(sample.draws.mean() - HALF_NORMAL_MEAN) < 3 * se


def test_unbounded_region_reduces_to_normal_sampling():
    cov = np.array([[1.0, 0.6], [0.6, 2.0]])
    t = TruncatedMvn(mean=np.zeros(2), cov=cov, lower=np.full(2, -np.inf))
    sample = tmvn_sample(t, 40_000, 3)
    assert sample.diagnostics.acceptance_rate == 1.0
    np.testing.assert_allclose(np.cov(sample.draws, rowvar=False), cov, atol=0.05)


def test_rejection_infeasible_and_auto_fallback():
    t = TruncatedMvn(mean=np.array([-10.0]), cov=np.eye(1))
    with pytest.raises(MnprobitInfeasibleMethodError):
        tmvn_sample(t, 10, 0, method="rejection")

    t = TruncatedMvn(mean=np.array([-4.0, -4.0]), cov=equicorrelated(2, 0.5))
    sample = tmvn_sample(t, 2000, 0, burn_in=100, thin=2)
    assert sample.diagnostics.method == "gibbs"
    assert not sample.diagnostics.exact
    assert sample.diagnostics.ess is not None
    assert np.all(sample.draws >= -1e-12)


def test_gibbs_matches_moments_for_strong_correlation():
    t = TruncatedMvn(mean=np.zeros(2), cov=equicorrelated(2, 0.9))
    moments = tmvn_moments(t, method="analytic")
    sample = tmvn_sample(t, 40_000, 5, method="gibbs", burn_in=200, thin=5)
    ess = sample.diagnostics.ess
    se = np.sqrt(np.diag(moments.cov) / ess)
    assert np.all(np.abs(sample.draws.mean(axis=0) - moments.mean) < 5 * se)


def test_sampler_rejects_unknown_method():
    with pytest.raises(MnprobitValidationError):
        tmvn_sample(TruncatedMvn(mean=np.zeros(1), cov=np.eye(1)), 10, 0, method="slice")


def test_analytic_half_normal_moments():
    moments = tmvn_moments(TruncatedMvn(mean=np.zeros(1), cov=np.eye(1)))
    assert moments.mean[0] == pytest.approx(HALF_NORMAL_MEAN, abs=1e-8)
    assert moments.cov[0, 0] == pytest.approx(HALF_NORMAL_VAR, abs=1e-8)


def test_analytic_moments_independent_orthant():
    moments = tmvn_moments(TruncatedMvn(mean=np.zeros(2), cov=np.eye(2)))
    np.testing.assert_allclose(moments.mean, HALF_NORMAL_MEAN, atol=1e-8)
    np.testing.assert_allclose(moments.cov, np.diag([HALF_NORMAL_VAR] * 2), atol=1e-8)


@pytest.mark.parametrize(
    "mean, cov",
    [
        (np.zeros(2), equicorrelated(2, 0.5)),
        (np.array([0.4, -0.3]), np.array([[1.5, -0.4], [-0.4, 0.8]])),
        (np.array([0.2, -0.5, 0.1]), equicorrelated(3, 0.3)),
    ],
)
def test_analytic_moments_match_monte_carlo(mean, cov):
    count = 200_000
    t = TruncatedMvn(mean=mean, cov=cov)
    analytic = tmvn_moments(t, method="analytic")
    draws = tmvn_sample(t, count, 11, method="rejection").draws
    se = draws.std(axis=0, ddof=1) / math.sqrt(count)
    assert np.all(np.abs(draws.mean(axis=0) - analytic.mean) < 4 * se)
    np.testing.assert_allclose(np.cov(draws, rowvar=False), analytic.cov, atol=0.02)
    np.testing.assert_allclose(analytic.cov, analytic.cov.T)
    assert np.all(np.linalg.eigvalsh(analytic.cov) > 0)


def test_mc_moments_are_reproducible():
    t = TruncatedMvn(mean=np.array([0.3, 0.1]), cov=equicorrelated(2, 0.2))
    first = tmvn_moments(t, method="mc", mc_draws=5000, rng=3)
    second = tmvn_moments(t, method="mc", mc_draws=5000, rng=3)
    np.testing.assert_array_equal(first.mean, second.mean)


def test_analytic_moments_capacity():
    t = TruncatedMvn(mean=np.zeros(3), cov=np.eye(3))
    with pytest.raises(MnprobitCapacityError):
        tmvn_moments(t, method="analytic", analytic_cap=2)
