import math

import numpy as np
import pytest
from pydantic import ValidationError
from scipy import integrate, stats

from src.likelihood import prepare_data
from src.model_core import PriorConfig, UniformSensitivity
from src.sampler import (
    AdaptiveBlock,
    ChainState,
    PosteriorSamples,
    SamplerConfig,
    flatten_state,
    gibbs_update_mixture_weights,
    gibbs_update_omega,
    gibbs_update_tau_h0,
    gibbs_update_tau_u,
    logit_from_rho,
    mh_update_block,
    parameter_names,
    rho_from_logit,
    run_chain,
    run_chains,
)
from src.tests.fixtures.cohorts import random_params, small_spec

QUICK = SamplerConfig(n_chains=2, n_iterations=30, n_adapt=10, thin=5, seed=42)


def test_sampler_config_schedule_validation():
    assert QUICK.n_draws == 4
    with pytest.raises(ValidationError):
        SamplerConfig(n_iterations=100, n_adapt=100)
    with pytest.raises(ValidationError):
        SamplerConfig(n_iterations=100, n_adapt=10, thin=7)


def test_omega_draws_match_inverse_wishart_mean():
    """Test the covariance update against the conjugate posterior mean."""
    rng = np.random.default_rng(0)
    priors = PriorConfig()
    u = rng.multivariate_normal(np.zeros(4), np.diag([0.5, 1.0, 1.5, 2.0]), size=60)
    draws = np.array([gibbs_update_omega(u, 2.0, priors, rng) for _ in range(4000)])
    df = priors.omega_df + u.shape[0]
    scale = (priors.omega_scale / 2.0) * np.eye(4) + u.T @ u
    expected = scale / (df - 4 - 1)
    diag = np.diag(draws.mean(axis=0))
    assert np.allclose(diag, np.diag(expected), rtol=0.05)
    assert np.allclose(draws, np.transpose(draws, (0, 2, 1)))


def test_mixture_weight_conditional_mean():
    rng = np.random.default_rng(1)
    residuals = np.full(20000, 0.8)
    lam = gibbs_update_mixture_weights(residuals, tau_eps=2.0, kappa=3.0, rng=rng)
    assert lam.mean() == pytest.approx(4.0 / (3.0 + 2.0 * 0.64), rel=0.02)


def test_scale_mixture_marginal_is_student_t():
    """Test that normals with Gamma(kappa/2, kappa/2) precisions are t distributed."""
    rng = np.random.default_rng(2)
    kappa, tau_eps = 3.0, 4.0
    lam = rng.gamma(kappa / 2, 2 / kappa, 5000)
    y = rng.normal(0.0, 1.0 / np.sqrt(tau_eps * lam))
    result = stats.kstest(y, stats.t(df=kappa, scale=1.0 / math.sqrt(tau_eps)).cdf)
    assert result.pvalue > 0.01


def test_tau_u_draws_follow_generalized_inverse_gaussian_conditional():
    rng = np.random.default_rng(3)
    priors = PriorConfig()
    omega = np.diag([0.5, 0.8, 1.2, 2.0])
    draws = np.array([gibbs_update_tau_u(omega, priors, rng) for _ in range(8000)])

    p = priors.tau_u_shape - 0.5 * priors.omega_df * 4
    a = 2 * priors.tau_u_rate
    b = priors.omega_scale * np.trace(np.linalg.inv(omega))

    def density(x):
        return x ** (p - 1) * math.exp(-0.5 * (a * x + b / x))

    norm = integrate.quad(density, 0, np.inf)[0]
    mean = integrate.quad(lambda x: x * density(x), 0, np.inf)[0] / norm
    assert draws.mean() == pytest.approx(mean, rel=0.03)


def test_tau_h0_conjugate_mean():
    rng = np.random.default_rng(4)
    spec = small_spec()
    penalty = spec.penalty_matrix("prg")
    gamma = np.array([-2.0, -1.5, -1.8, -2.2, -2.0])
    priors = PriorConfig()
    draws = [gibbs_update_tau_h0(gamma, penalty.matrix, penalty.rank_term, priors, rng) for _ in range(5000)]
    shape = priors.tau_h0_shape + 0.5 * penalty.rank_term
    rate = priors.tau_h0_rate + 0.5 * gamma @ penalty.matrix @ gamma
    assert np.mean(draws) == pytest.approx(shape / rate, rel=0.03)


def test_adaptive_metropolis_targets_standard_normal():
    rng = np.random.default_rng(5)
    block = AdaptiveBlock("x", 1, 0.44, 5.0)
    x, log_target = np.zeros(1), 0.0
    samples = []
    for i in range(20000):
        result = mh_update_block(block, x, log_target, lambda z: -0.5 * float(z @ z), rng, i if i < 2000 else None)
        x, log_target = result.value, result.log_target
        if i >= 2000:
            samples.append(x[0])
    samples = np.asarray(samples)
    assert abs(samples.mean()) < 0.1
    assert samples.var() == pytest.approx(1.0, rel=0.1)
    assert 0.3 < block.acceptance_rate < 0.6


def test_adaptive_metropolis_recovers_conjugate_normal_posterior():
    """Test a bivariate normal mean with known covariance against its closed-form posterior."""
    rng = np.random.default_rng(8)
    sigma = np.array([[1.0, 0.8], [0.8, 1.0]])
    prior_mean, prior_cov = np.array([0.5, -0.5]), 4.0 * np.eye(2)
    y = rng.multivariate_normal([1.0, 2.0], sigma, size=20)

    sigma_inv, prior_inv = np.linalg.inv(sigma), np.linalg.inv(prior_cov)
    post_cov = np.linalg.inv(prior_inv + len(y) * sigma_inv)
    post_mean = post_cov @ (prior_inv @ prior_mean + sigma_inv @ y.sum(axis=0))

    def log_target(mu):
        resid = y - mu
        prior = mu - prior_mean
        loglik = -0.5 * float(np.sum(resid @ sigma_inv * resid))
        return loglik - 0.5 * float(prior @ prior_inv @ prior)

    block = AdaptiveBlock("mu", 2, 0.234, 1.0)
    mu = y.mean(axis=0)
    current = log_target(mu)
    n_adapt, n_iterations = 5000, 40000
    samples = []
    for i in range(n_iterations):
        result = mh_update_block(block, mu, current, log_target, rng, i if i < n_adapt else None)
        mu, current = result.value, result.log_target
        if i >= n_adapt:
            samples.append(mu)
    samples = np.asarray(samples)

    post_sd = np.sqrt(np.diag(post_cov))
    assert np.all(np.abs(samples.mean(axis=0) - post_mean) < 0.1 * post_sd)
    assert np.allclose(samples.var(axis=0), np.diag(post_cov), rtol=0.2)
    corr = np.corrcoef(samples.T)[0, 1]
    assert corr == pytest.approx(post_cov[0, 1] / np.prod(post_sd), abs=0.05)
    # The adapted proposal follows the posterior correlation
    assert block.n_seen == n_adapt
    adapted = block.shape_chol @ block.shape_chol.T
    assert adapted[0, 1] / np.sqrt(np.prod(np.diag(adapted))) == pytest.approx(corr, abs=0.15)


def test_non_finite_proposal_is_rejected():
    rng = np.random.default_rng(6)
    block = AdaptiveBlock("x", 1, 0.44, 1.0)
    result = mh_update_block(block, np.zeros(1), 0.0, lambda z: -np.inf, rng)
    assert not result.accepted
    assert result.value.tolist() == [0.0]


def test_rho_logit_round_trip_within_uniform_bounds():
    spec = small_spec(UniformSensitivity(lo=0.6, hi=0.9))
    for rho in (0.61, 0.75, 0.89):
        assert rho_from_logit(spec, logit_from_rho(spec, rho)) == pytest.approx(rho)
    assert 0.6 < rho_from_logit(spec, 30.0) <= 0.9


def test_parameter_names_align_with_flattened_state():
    spec = small_spec()
    params = random_params(spec, ["S1"], np.random.default_rng(7))
    names = parameter_names(spec)
    values = flatten_state(params)
    assert len(names) == values.size
    assert values[names.index("sigma")] == pytest.approx(params.sigma)
    assert values[names.index("omega_2_3")] == params.omega[1, 2]


@pytest.fixture(scope="module")
def quick_fit(simulated):
    spec = simulated.truth.model_spec()
    data = prepare_data(spec, simulated.patients)
    return spec, data, run_chains(spec, data, QUICK, workers=2)


def test_run_chains_shapes(quick_fit):
    spec, data, samples = quick_fit
    assert samples.draws.shape == (2, QUICK.n_draws, len(parameter_names(spec)))
    assert samples.iterations.tolist() == [15, 20, 25, 30]
    assert np.all(np.isfinite(samples.draws))
    # The sensitivity is fixed in this spec
    assert np.all(samples.parameter("rho") == 0.75)


def test_run_chains_deterministic(quick_fit):
    spec, data, samples = quick_fit
    again = run_chains(spec, data, QUICK, workers=1)
    assert np.array_equal(samples.draws, again.draws)


def test_parallel_chains_checkpoint_and_resume_in_worker_processes(quick_fit, temp_directory):
    spec, data, samples = quick_fit
    parallel = run_chains(spec, data, QUICK, workers=2, checkpoint_dir=temp_directory, checkpoint_every=10)
    assert np.array_equal(parallel.draws, samples.draws)
    assert sorted(p.name for p in temp_directory.glob("chain_*.json")) == ["chain_1.json", "chain_2.json"]

    resumed = run_chains(spec, data, QUICK, workers=2, checkpoint_dir=temp_directory, resume=True)
    assert np.array_equal(resumed.draws, samples.draws)
    assert resumed.subject_ids == samples.subject_ids


def test_resumed_chain_matches_uninterrupted_run(simulated, temp_directory):
    spec = simulated.truth.model_spec()
    data = prepare_data(spec, simulated.patients)
    seed = np.random.SeedSequence(9)
    full = run_chain(spec, data, QUICK, chain=1, seed_sequence=seed)

    checkpoint = temp_directory / "chain_1.json"
    run_chain(spec, data, QUICK, chain=1, seed_sequence=np.random.SeedSequence(9), stop_at=17, checkpoint=checkpoint)
    state = ChainState.load(checkpoint)
    assert state.iteration == 17
    resumed = run_chain(spec, data, QUICK, chain=1, state=state)
    assert np.allclose(resumed.draws, full.draws, rtol=1e-10)
    assert resumed.draw_iterations == full.draw_iterations


def test_posterior_samples_long_frame_round_trip(quick_fit):
    _, _, samples = quick_fit
    restored = PosteriorSamples.from_long_frame(samples.to_long_frame())
    assert restored.names == samples.names
    assert np.array_equal(restored.draws, samples.draws)
    summary = samples.summary().set_index("parameter")
    assert summary.loc["beta_0", "q2.5"] <= summary.loc["beta_0", "q97.5"]
