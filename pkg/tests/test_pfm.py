import math

import numpy as np
import pytest
from scipy.stats import norm

from mnprobit.core.model import Dataset, MnpModel, build_design_expansion, simulate_dataset
from mnprobit.core.pfm import (
    cavi_sweep,
    elbo,
    initial_state,
    precompute,
    resolve_moment_method,
    run_cavi,
    vb_beta_moments,
    vb_sample_beta,
    woodbury_residual,
)
from mnprobit.core.sun import log_evidence, posterior_params, sun_sample
from mnprobit.utils.errors import MnprobitConvergenceError, MnprobitValidationError


@pytest.fixture
def coupled_model() -> MnpModel:
    """n=50, p=3, L=3 instance with nu=5: strong coupling between blocks."""
    beta = [0.6, -0.4, 0.3, -0.5, 0.2, 0.4]
    data, _ = simulate_dataset(beta, n=50, p=3, sigma=np.eye(3), seed=50, covariates="intercept")
    return MnpModel(data=data, sigma=np.eye(3), nu2=25.0)


def test_zero_design_precomputation(zero_design_model):
    expansion = build_design_expansion(zero_design_model)
    precomp = precompute(zero_design_model, expansion)
    np.testing.assert_allclose(precomp.v, 9.0 * np.eye(zero_design_model.q))
    np.testing.assert_array_equal(precomp.h_blocks, 0.0)
    for star, block in zip(precomp.sigma_star, expansion.lambda_blocks):
        np.testing.assert_allclose(star.values, block)


def test_single_block_sigma_star(single_obs_model):
    expansion = build_design_expansion(single_obs_model)
    precomp = precompute(single_obs_model, expansion)
    xbar = expansion.xbar_block(0)
    expected = expansion.lambda_blocks[0] + single_obs_model.nu2 * xbar @ xbar.T
    np.testing.assert_allclose(precomp.sigma_star[0].values, expected, atol=1e-10)


def test_woodbury_residual_on_random_instances(make_pd):
    rng = np.random.default_rng(40)
    for _ in range(100):
        n, p, L = int(rng.integers(1, 21)), int(rng.integers(1, 4)), int(rng.integers(2, 5))
        sigma = make_pd(L, rng)
        data, _ = simulate_dataset("from-prior", n=n, p=p, sigma=sigma, seed=int(rng.integers(1_000_000)))
        model = MnpModel(data=data, sigma=sigma, nu2=float(rng.uniform(0.5, 4.0)))
        expansion = build_design_expansion(model)
        precomp = precompute(model, expansion)
        assert woodbury_residual(precomp, expansion, model.nu2) < 1e-8
        assert len(precomp.sigma_star) == n


def test_moment_method_resolution():
    assert resolve_moment_method(None, 2) == "analytic"
    assert resolve_moment_method(None, 8) == "analytic"
    assert resolve_moment_method(None, 9) == "mc"
    assert resolve_moment_method("mc", 2) == "mc"
    with pytest.raises(MnprobitValidationError):
        resolve_moment_method("exact", 2)


def test_initial_state_policies(small_model, small_expansion):
    precomp = precompute(small_model, small_expansion)
    default = initial_state(precomp, small_expansion)
    np.testing.assert_allclose(default.m, math.sqrt(2.0 / math.pi) * math.sqrt(2.0))
    np.testing.assert_array_equal(initial_state(precomp, small_expansion, "ones").m, 1.0)
    explicit = np.full((10, 2), 0.5)
    np.testing.assert_array_equal(initial_state(precomp, small_expansion, explicit).m, explicit)
    with pytest.raises(MnprobitValidationError):
        initial_state(precomp, small_expansion, "random")
    with pytest.raises(MnprobitValidationError):
        initial_state(precomp, small_expansion, np.ones((3, 2)))


def test_sweep_matches_scalar_updates():
    data = Dataset(y=np.array([1, 2]), X=np.array([[0.8], [-1.3]]), n_classes=2)
    model = MnpModel(data=data, sigma=np.eye(2), nu2=3.0)
    expansion = build_design_expansion(model)
    precomp = precompute(model, expansion)
    state = initial_state(precomp, expansion, "ones")

    # binary probit with Lambda = 2: scalar Woodbury and half-line truncated means
    lam = 2.0
    xbar = expansion.xbar[:, 0]
    v = 1.0 / (1.0 / model.nu2 + np.sum(xbar**2) / lam)
    h = np.outer(xbar, xbar) * v / lam**2
    m = [1.0, 1.0]
    for i, j in ((0, 1), (1, 0)):
        star = 1.0 / (1.0 / lam - h[i, i])
        mu = star * h[i, j] * m[j]
        sd = math.sqrt(star)
        m[i] = mu + sd * norm.pdf(mu / sd) / norm.cdf(mu / sd)

    swept = cavi_sweep(state, precomp)
    np.testing.assert_allclose(swept.m[:, 0], m, atol=1e-12)
    assert swept.sweep_count == 1
    np.testing.assert_array_equal(state.m, 1.0)


def test_reverse_order_reaches_same_fixed_point(small_model):
    forward = run_cavi(small_model, eps=1e-10)
    reverse = run_cavi(small_model, eps=1e-10, order="reverse")
    np.testing.assert_allclose(forward.state.m, reverse.state.m, atol=1e-7)


def test_zero_design_converges_immediately(zero_design_model):
    vb = run_cavi(zero_design_model)
    assert vb.converged
    # the first sweep reaches the fixed point, the second confirms it
    assert vb.state.sweep_count == 2
    mean, cov = vb_beta_moments(vb)
    np.testing.assert_allclose(mean, 0.0, atol=1e-12)
    np.testing.assert_allclose(cov, 9.0 * np.eye(zero_design_model.q), atol=1e-12)


def test_single_block_reaches_fixed_point_in_one_sweep(single_obs_model):
    expansion = build_design_expansion(single_obs_model)
    vb = run_cavi(single_obs_model, expansion=expansion)
    assert vb.converged
    assert vb.state.sweep_count == 2
    assert vb.state.last_delta == 0.0
    np.testing.assert_array_equal(vb.state.mu, 0.0)
    assert vb.state.elbo_trace[-1] == pytest.approx(log_evidence(single_obs_model, expansion), abs=1e-4)


@pytest.mark.slow
def test_single_block_is_exact_on_random_instances(make_pd):
    rng = np.random.default_rng(99)
    count = 100_000
    for instance in range(10):
        L, p = int(rng.integers(2, 5)), int(rng.integers(1, 4))
        sigma = make_pd(L, rng)
        data, _ = simulate_dataset("from-prior", n=1, p=p, sigma=sigma, seed=400 + instance)
        model = MnpModel(data=data, sigma=sigma, nu2=float(rng.uniform(0.5, 4.0)))
        expansion = build_design_expansion(model)

        vb = run_cavi(model, expansion=expansion)
        assert vb.converged, (instance, vb.state.last_delta)
        assert vb.state.sweep_count == 2
        assert vb.state.elbo_trace[-1] == pytest.approx(log_evidence(model, expansion), abs=1e-4)

        mean, cov = vb_beta_moments(vb)
        exact = sun_sample(posterior_params(model, expansion), count, 77 + instance)
        se = np.sqrt(np.diag(cov) / count)
        assert np.all(np.abs(exact.samples.mean(axis=0) - mean) < 4 * se), instance
        np.testing.assert_allclose(
            np.cov(exact.samples, rowvar=False).reshape(cov.shape), cov, atol=0.05 * np.max(np.diag(cov))
        )


def test_elbo_of_zero_design_binary_model():
    data = Dataset(y=np.array([1, 2, 2, 1, 2]), X=np.zeros((5, 2)), n_classes=2)
    model = MnpModel(data=data, sigma=np.eye(2), nu2=3.0)
    expansion = build_design_expansion(model)
    vb = run_cavi(model, expansion=expansion)
    # every block is TN(0, 2) on the half line, normalized by 1/2
    assert vb.state.elbo_trace[-1] == pytest.approx(5 * math.log(0.5), abs=1e-10)
    assert log_evidence(model, expansion) == pytest.approx(5 * math.log(0.5), abs=1e-12)


def test_elbo_of_zero_design_three_classes(zero_design_model):
    vb = run_cavi(zero_design_model)
    # orthant probability of a bivariate normal with correlation 1/2
    assert vb.state.elbo_trace[-1] == pytest.approx(4 * math.log(1.0 / 3.0), abs=1e-8)


@pytest.mark.slow
def test_cavi_converges_with_monotone_elbo(coupled_model):
    expansion = build_design_expansion(coupled_model)
    vb = run_cavi(coupled_model, eps=1e-8, max_sweeps=1000, expansion=expansion)
    assert vb.converged
    trace = np.array(vb.state.elbo_trace)
    assert trace.size == vb.state.sweep_count
    assert np.all(np.diff(trace) >= -1e-9)
    assert trace[-1] <= log_evidence(coupled_model, expansion) + 1e-2

    extra = cavi_sweep(vb.state, vb.precomp)
    assert np.max(np.abs(extra.m - vb.state.m)) < 1e-7


def test_vb_moments_cov_dominates_v(small_model):
    vb = run_cavi(small_model, track_elbo=False)
    _, cov = vb_beta_moments(vb)
    np.testing.assert_allclose(cov, cov.T)
    assert np.min(np.linalg.eigvalsh(cov - vb.precomp.v)) > -1e-10


def test_vb_sampling_matches_moments(small_model):
    vb = run_cavi(small_model, track_elbo=False)
    mean, cov = vb_beta_moments(vb)
    count = 100_000
    draws = vb_sample_beta(vb, count, 13)
    assert draws.source == "vb"
    se = np.sqrt(np.diag(cov) / count)
    assert np.all(np.abs(draws.samples.mean(axis=0) - mean) < 4 * se)
    np.testing.assert_allclose(np.cov(draws.samples, rowvar=False), cov, atol=0.05 * np.max(np.diag(cov)))
    np.testing.assert_array_equal(vb_sample_beta(vb, 50, 13).samples, vb_sample_beta(vb, 50, 13).samples)


def test_unconverged_state_is_flagged(coupled_model):
    vb = run_cavi(coupled_model, max_sweeps=1, track_elbo=False)
    assert not vb.converged
    assert vb.state.sweep_count == 1
    with pytest.raises(MnprobitConvergenceError):
        vb_beta_moments(vb)
    with pytest.raises(MnprobitConvergenceError):
        vb_sample_beta(vb, 10, 0)
    mean, _ = vb_beta_moments(vb, allow_unconverged=True)
    assert mean.shape == (coupled_model.q,)


def test_monte_carlo_moments_are_reproducible(small_model):
    first = run_cavi(small_model, max_sweeps=3, moment_method="mc", seed=5, mc_draws=2000, track_elbo=False)
    second = run_cavi(small_model, max_sweeps=3, moment_method="mc", seed=5, mc_draws=2000, track_elbo=False)
    np.testing.assert_array_equal(first.state.m, second.state.m)
    with pytest.raises(MnprobitValidationError):
        run_cavi(small_model, max_sweeps=1, moment_method="mc", track_elbo=False)


def test_resume_from_stored_means(small_model):
    full = run_cavi(small_model, eps=1e-10, track_elbo=False)
    resumed = run_cavi(small_model, eps=1e-10, init=full.state.m, track_elbo=False)
    assert resumed.state.sweep_count <= 2
    np.testing.assert_allclose(resumed.state.m, full.state.m, atol=1e-9)


def test_elbo_needs_moments(small_model, small_expansion):
    precomp = precompute(small_model, small_expansion)
    with pytest.raises(MnprobitValidationError):
        elbo(initial_state(precomp, small_expansion), precomp, small_expansion, small_model)


def test_run_cavi_argument_errors(small_model):
    with pytest.raises(MnprobitValidationError):
        run_cavi(small_model, eps=0.0)
    with pytest.raises(MnprobitValidationError):
        run_cavi(small_model, max_sweeps=0)


@pytest.mark.slow
def test_exact_and_variational_means_agree(coupled_model):
    model = coupled_model
    expansion = build_design_expansion(model)
    vb = run_cavi(model, expansion=expansion)
    assert vb.converged
    vb_mean, _ = vb_beta_moments(vb)
    exact = sun_sample(posterior_params(model, expansion), 20_000, 3, trunc_method="gibbs", burn_in=200)
    exact_mean = exact.samples.mean(axis=0)
    exact_sd = exact.samples.std(axis=0, ddof=1)
    assert np.all(np.abs(vb_mean - exact_mean) <= 0.15 * exact_sd)


def test_monte_carlo_sweeps_reuse_a_seed_sequence(small_model, small_expansion):
    precomp = precompute(small_model, small_expansion)
    state = initial_state(precomp, small_expansion)
    sequence = np.random.SeedSequence(5)
    first = cavi_sweep(state, precomp, "mc", seed=sequence, mc_draws=500)
    second = cavi_sweep(state, precomp, "mc", seed=sequence, mc_draws=500)
    np.testing.assert_array_equal(first.m, second.m)
