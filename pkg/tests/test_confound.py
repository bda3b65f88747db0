import math

import numpy as np
import pandas as pd
import pytest
from scipy import stats
from scipy.special import expit

from policy_sensitivity.confound import (CHAINS, BinAssignment, ConfoundModel, ConfoundParams, SensitivitySpec,
                                         bin_by_risk, fit_sensitivity, log_posterior, positive_random_walk_log_prior,
                                         posterior_policy_value, posterior_subgroup_ate, prior_robustness,
                                         prior_robustness_check, random_walk_log_prior, sensitivity_curve,
                                         simulate_confounded, summarize_draws)
from policy_sensitivity.exceptions import AlignmentError, DomainError
from policy_sensitivity.glm import NuisanceEstimates, log_likelihood_and_gradient
from policy_sensitivity.mcmc import PosteriorDraws, SamplerConfig, check_gradient
from policy_sensitivity.policy import Policy, direct_policy_value, make_policy_family


def params_for(K, n, rng, u=None):
    values = {name: rng.normal(0.0, 0.5, K) for name in CHAINS}
    for name in ('alpha_u', 'beta_u', 'gamma_u'):
        values[name] = rng.uniform(0.2, 1.5, K)
    return ConfoundParams(tau=rng.uniform(0.3, 2.0, len(CHAINS)),
                          u=rng.standard_normal(n) if u is None else u, **values)


def single_draw(model, x, bins, sigma_tau=1.0):
    return PosteriorDraws(
        draws=np.asarray(x, dtype=float)[None, None, :], parameter_names=model.parameter_names,
        accept_stat=np.ones((1, 1)), divergent=np.zeros((1, 1), dtype=bool), n_steps=np.ones((1, 1), dtype=int),
        step_size=np.ones(1), inv_metric=np.ones((1, model.dimension)), rhat=np.full(model.dimension, np.nan),
        ess=np.full(model.dimension, np.nan),
        attrs={'K': bins.K, 'bins': bins.k, 'sigma_tau': sigma_tau, 'pin_loadings': model.pin_loadings},
    )


class TestBins:

    def test_sizes_differ_by_at_most_one(self):
        bins = bin_by_risk(np.linspace(0.0, 1.0, 10), 3)
        assert list(bins.sizes) == [4, 3, 3]

    def test_blocks_are_sorted_by_risk(self):
        scores = np.random.default_rng(0).random(103)
        bins = bin_by_risk(scores, 7)
        for k in range(1, 7):
            assert scores[bins.k == k].max() <= scores[bins.k == k + 1].min()
        assert bins.sizes.max() - bins.sizes.min() <= 1

    def test_ties_follow_ids(self):
        bins = bin_by_risk(np.zeros(4), 2, ids=[40, 30, 20, 10])
        assert list(bins.k) == [2, 2, 1, 1]

    def test_bad_k(self):
        with pytest.raises(DomainError):
            bin_by_risk(np.zeros(3), 4)
        with pytest.raises(DomainError):
            bin_by_risk(np.zeros(3), 0)


class TestPriors:

    def test_random_walk_hand_value(self):
        value, grad, _ = random_walk_log_prior([0.0, 1.0], 1.0)
        assert value == pytest.approx(-math.log(2 * math.pi) - 0.5, abs=1e-14)
        np.testing.assert_allclose(grad, [1.0, -1.0])

    def test_positive_random_walk_matches_scipy(self):
        values, tau = np.array([1.0, 2.0, 0.4]), 0.5
        value, _, _ = positive_random_walk_log_prior(values, tau)
        expected = stats.halfnorm.logpdf(values[0])
        for previous, current in zip(values[:-1], values[1:]):
            expected += stats.truncnorm.logpdf(current, -previous / tau, np.inf, loc=previous, scale=tau)
        assert value == pytest.approx(expected, abs=1e-12)

    @pytest.mark.parametrize('prior', [random_walk_log_prior, positive_random_walk_log_prior])
    def test_prior_derivatives(self, prior):
        values, tau = np.array([0.7, 1.1, 0.2, 2.5]), 0.8
        _, grad, grad_tau = prior(values, tau)
        for j in range(values.size):
            shift = np.zeros_like(values)
            shift[j] = 1e-6
            numeric = (prior(values + shift, tau)[0] - prior(values - shift, tau)[0]) / 2e-6
            assert numeric == pytest.approx(grad[j], abs=1e-6)
        numeric_tau = (prior(values, tau + 1e-6)[0] - prior(values, tau - 1e-6)[0]) / 2e-6
        assert numeric_tau == pytest.approx(grad_tau, abs=1e-6)


class TestModel:

    def test_layout(self):
        d, nz, bins, _ = simulate_confounded(20, 3, seed=0)
        model = ConfoundModel(d, nz, bins)
        assert model.dimension == 9 * 3 + 9 + 20
        assert model.parameter_names[0] == 'alpha_0[1]'
        assert model.parameter_names[27] == 'tau[alpha_0]'
        assert model.parameter_names[-1] == 'u[20]'
        pinned = ConfoundModel(d, nz, bins, pin_loadings=True)
        assert pinned.dimension == 6 * 3 + 6

    def test_pack_inverts_constrained(self):
        d, nz, bins, _ = simulate_confounded(15, 2, seed=1)
        model = ConfoundModel(d, nz, bins)
        params = params_for(2, 15, np.random.default_rng(2))
        back = model.constrained(model.pack(params))
        for name in CHAINS:
            np.testing.assert_allclose(back.chain(name), params.chain(name), rtol=1e-12)
        np.testing.assert_allclose(back.u, params.u)

    def test_single_bin_collapses_to_three_regressions(self):
        d, nz, bins, _ = simulate_confounded(50, 1, seed=3)
        model = ConfoundModel(d, nz, bins)
        params = params_for(1, 50, np.random.default_rng(4), u=np.zeros(50))
        value, _ = model.log_likelihood(model.pack(params))
        t = d.treatment == 1
        y = d.outcome.astype(float)
        expected = (
            log_likelihood_and_gradient(params.gamma_0[0], params.gamma_ehat, nz.e_hat[:, None],
                                        d.treatment.astype(float))[0]
            + log_likelihood_and_gradient(params.alpha_0[0], params.alpha_mu0, nz.mu0_hat[~t, None], y[~t])[0]
            + log_likelihood_and_gradient(params.beta_0[0], params.beta_mu1, nz.mu1_hat[t, None], y[t])[0]
        )
        assert value == pytest.approx(expected, abs=1e-10)

    @pytest.mark.parametrize('n,K', [(10, 1), (10, 3), (50, 3), (200, 10), (200, 1)])
    def test_gradient_matches_finite_differences(self, n, K):
        d, nz, bins, _ = simulate_confounded(n, K, seed=n + K)
        model = ConfoundModel(d, nz, bins, sigma_tau=0.7)
        rng = np.random.default_rng(K)
        for _ in range(4):
            point = rng.normal(0.0, 0.5, model.dimension)
            assert check_gradient(model, point) < 1e-5

    def test_pinned_gradient(self):
        d, nz, bins, _ = simulate_confounded(40, 4, seed=5)
        model = ConfoundModel(d, nz, bins, pin_loadings=True)
        point = np.random.default_rng(6).normal(0.0, 0.5, model.dimension)
        assert check_gradient(model, point) < 1e-5

    def test_log_posterior_function(self):
        d, nz, bins, _ = simulate_confounded(30, 2, seed=7)
        spec = SensitivitySpec(K=2, sigma_tau=0.5)
        x = np.random.default_rng(8).normal(0.0, 0.3, ConfoundModel(d, nz, bins).dimension)
        value, grad = log_posterior(x, d, nz, bins, spec)
        expected, _ = ConfoundModel(d, nz, bins, 0.5).value_and_gradient(x)
        assert value == expected
        assert grad.shape == x.shape

    def test_misaligned_inputs(self):
        d, nz, bins, _ = simulate_confounded(30, 2, seed=7)
        with pytest.raises(AlignmentError):
            ConfoundModel(d, nz.take(np.arange(10)), bins)
        with pytest.raises(AlignmentError):
            ConfoundModel(d, nz, BinAssignment(2, bins.k[:10]))


class TestPolicyValues:

    def test_single_draw_hand_value(self, make_dataset):
        d = make_dataset([0, 1, 1, 0], [1, 0, 1, 0])
        nz = NuisanceEstimates(d.ids.copy(), np.array([0.1, 0.2, 0.3, 0.4]), np.array([0.5, 0.4, 0.3, 0.2]),
                               np.full(4, 0.5))
        bins = bin_by_risk(nz.mu0_hat, 1, d.ids)
        model = ConfoundModel(d, nz, bins)
        params = params_for(1, 4, np.random.default_rng(9))
        draws = single_draw(model, model.pack(params), bins)
        # units 2 and 3 were bailed; units 1 and 4 were released and need counterfactuals
        pi = Policy.fixed([1, 1, 1, 1])
        p1 = expit(params.beta_0[0] + params.beta_mu1[0] * 0.5 + params.beta_u[0] * params.u[0])
        p4 = expit(params.beta_0[0] + params.beta_mu1[0] * 0.2 + params.beta_u[0] * params.u[3])
        value = posterior_policy_value(draws, d, nz, bins, pi)
        assert value.shape == (1,)
        assert value[0] == pytest.approx((0 + 1 + p1 + p4) / 4, abs=1e-14)
        release = posterior_policy_value(draws, d, nz, None, Policy.fixed([0, 0, 0, 0]))
        p2 = expit(params.alpha_0[0] + params.alpha_mu0[0] * 0.2 + params.alpha_u[0] * params.u[1])
        p3 = expit(params.alpha_0[0] + params.alpha_mu0[0] * 0.3 + params.alpha_u[0] * params.u[2])
        assert release[0] == pytest.approx((1 + p2 + p3 + 0) / 4, abs=1e-14)

    def test_observed_policy_has_no_posterior_spread(self):
        d, nz, bins, _ = simulate_confounded(40, 2, seed=10)
        model = ConfoundModel(d, nz, bins)
        rng = np.random.default_rng(11)
        draws = single_draw(model, rng.normal(size=model.dimension), bins)
        draws.draws = np.stack([rng.normal(size=(5, model.dimension)) for _ in range(2)])
        values = posterior_policy_value(draws, d, nz, bins, Policy.fixed(d.treatment))
        assert values.shape == (10,)
        np.testing.assert_allclose(values, d.outcome.mean(), rtol=0, atol=1e-15)

    def test_subgroup_effect_per_draw(self):
        d, nz, bins, _ = simulate_confounded(40, 2, seed=12)
        model = ConfoundModel(d, nz, bins)
        draws = single_draw(model, np.zeros(model.dimension), bins)
        effect = posterior_subgroup_ate(draws, d, nz, bins, d.ids < 21, name='first half')
        assert effect.shape == (1,)

    def test_draws_must_match_model(self):
        d, nz, bins, _ = simulate_confounded(40, 2, seed=13)
        model = ConfoundModel(d, nz, bins, pin_loadings=True)
        draws = single_draw(model, np.zeros(model.dimension), bins)
        draws.attrs['pin_loadings'] = False
        with pytest.raises(AlignmentError):
            posterior_policy_value(draws, d, nz, None, Policy.fixed(d.treatment))


def test_summaries():
    summary = summarize_draws(np.arange(101.0))
    assert summary['q50'] == 50.0
    assert summary['q025'] == 2.5
    assert summary['mean'] == 50.0


def test_prior_robustness_check():
    table = pd.DataFrame({
        'K': [5, 10, 5, 10], 'sigma_tau': [1.0] * 4, 'threshold': [0.1, 0.1, 0.2, 0.2],
        'q25': [0.10, 0.11, 0.10, 0.20], 'q50': [0.12, 0.13, 0.12, 0.25], 'q75': [0.15, 0.16, 0.15, 0.30],
    })
    check = prior_robustness_check(table)
    assert check['robust'].tolist() == [True, False]
    assert check['median_spread'].iloc[1] == pytest.approx(0.13)


def test_sensitivity_fit_smoke():
    d, nz, _, _ = simulate_confounded(60, 2, seed=14)
    spec = SensitivitySpec(K=2, sampler=SamplerConfig(chains=2, warmup_iters=100, draw_iters=50, seed=1))
    draws = fit_sensitivity(d, nz, spec)
    assert draws.draws.shape == (2, 50, 9 * 2 + 9 + 60)
    assert draws.status in ('clean', 'warning', 'failed')
    assert draws.attrs['K'] == 2
    policies = [Policy.threshold(nz.mu0_hat, s) for s in (0.1, 0.3)]
    curve = sensitivity_curve(draws, d, nz, None, policies)
    assert list(curve['threshold']) == [0.1, 0.3]
    assert np.all(curve['q025'] <= curve['q975'])
    again = fit_sensitivity(d, nz, spec)
    np.testing.assert_array_equal(again.draws, draws.draws)


@pytest.mark.slow
def test_pinned_loadings_agree_with_direct_estimate():
    d, nz, _, _ = simulate_confounded(800, 3, seed=15)
    rng = np.random.default_rng(16)
    # outcomes consistent with the nuisance estimates and no confounder
    y = np.where(d.treatment == 1, rng.random(len(d)) < nz.mu1_hat, rng.random(len(d)) < nz.mu0_hat)
    d = d.with_outcome(y.astype(np.int8))
    spec = SensitivitySpec(K=3, sampler=SamplerConfig(chains=4, warmup_iters=500, draw_iters=500, seed=2))
    draws = fit_sensitivity(d, nz, spec, pin_loadings=True)
    for s in (0.15, 0.3):
        pi = Policy.threshold(nz.mu0_hat, s)
        values = posterior_policy_value(draws, d, nz, None, pi)
        direct = direct_policy_value(d, pi, nz).value
        assert abs(np.median(values) - direct) < 2 * values.std() + 0.01


@pytest.mark.slow
def test_recovers_self_generated_effect():
    d, nz, bins, params = simulate_confounded(500, 3, seed=17)
    k = bins.index
    truth = np.mean(expit(params.beta_0[k] + params.beta_mu1[k] * nz.mu1_hat + params.beta_u[k] * params.u)
                    - expit(params.alpha_0[k] + params.alpha_mu0[k] * nz.mu0_hat + params.alpha_u[k] * params.u))
    spec = SensitivitySpec(K=3, sampler=SamplerConfig(chains=4, warmup_iters=500, draw_iters=500, seed=3))
    draws = fit_sensitivity(d, nz, spec)
    effect = posterior_subgroup_ate(draws, d, nz, None, np.ones(len(d), dtype=bool), name='all')
    assert abs(np.median(effect) - truth) < 2 * effect.std()


@pytest.mark.slow
def test_intercept_intervals_cover_generating_values():
    hits = []
    for seed in range(20):
        d, nz, _, params = simulate_confounded(500, 5, seed=100 + seed)
        spec = SensitivitySpec(K=5, sampler=SamplerConfig(chains=2, warmup_iters=300, draw_iters=300, seed=seed))
        draws = fit_sensitivity(d, nz, spec)
        flat = draws.flat()
        for k in range(5):
            lo, hi = np.quantile(flat[:, draws.index(f'alpha_0[{k + 1}]')], [0.05, 0.95])
            hits.append(lo <= params.alpha_0[k] <= hi)
    assert np.mean(hits) >= 0.8


@pytest.mark.slow
def test_prior_sweep_keeps_medians_within_bands():
    d, nz, _, _ = simulate_confounded(1000, 5, seed=21)
    policies = make_policy_family(nz.mu0_hat, (0.1, 0.2, 0.3))
    sampler = SamplerConfig(chains=2, warmup_iters=300, draw_iters=400, seed=4)
    table = prior_robustness(d, nz, policies, Ks=(5, 10), sigma_taus=(0.5, 1.0, 2.0), sampler=sampler)
    assert len(table) == 2 * 3 * 3
    assert prior_robustness_check(table)['robust'].all()
    widths = table.assign(width95=table['q975'] - table['q025']).groupby('sigma_tau')['width95'].mean()
    # a looser prior on the walk scales never narrows the bands beyond sampling noise
    assert np.all(np.diff(widths.to_numpy()) >= -0.05 * widths.to_numpy()[:-1])
