import numpy as np
import pandas as pd
import pytest

from policy_sensitivity.confound import SensitivitySpec
from policy_sensitivity.exceptions import ConfigError, ValidationError
from policy_sensitivity.glm import fit_nuisance
from policy_sensitivity.mcmc import SamplerConfig
from policy_sensitivity.policy import Policy, oracle_policy_value
from policy_sensitivity.synthetic import (BASE_SCHEMA, ScenarioSpec, SyntheticTruth, censor, default_subgroups,
                                          draw_potential_outcomes, generate_truth, run_validation_suite,
                                          truth_from_dataset)


def test_forced_probabilities():
    probs = np.tile([0.0, 1.0, 1.0], (50, 1))
    y0, y1, t = draw_potential_outcomes(probs, seed=3)
    assert not y0.any()
    assert y1.all()
    assert t.all()


def test_default_scenario_hits_status_quo_marginals(truth):
    assert truth.t.mean() == pytest.approx(0.31, abs=0.01)
    assert truth.y0[truth.t == 0].mean() == pytest.approx(0.15, abs=0.01)
    assert truth.y1[truth.t == 1].mean() == pytest.approx(0.09, abs=0.01)
    assert truth.base.schema == BASE_SCHEMA


def test_observed_view_is_consistent(truth):
    np.testing.assert_array_equal(truth.base.outcome, np.where(truth.t == 1, truth.y1, truth.y0))
    with pytest.raises(ValidationError):
        SyntheticTruth(truth.base, truth.y0, 1 - truth.y1, truth.t, truth.generator_probs)


def test_generation_is_deterministic():
    spec = ScenarioSpec(n=500)
    first, second = generate_truth(spec, seed=4), generate_truth(spec, seed=4)
    pd.testing.assert_frame_equal(first.to_frame(), second.to_frame())
    assert not np.array_equal(first.y0, generate_truth(spec, seed=5).y0)


def test_noise_features_extend_schema():
    truth = generate_truth(ScenarioSpec(n=1000, noise_features=2), seed=1)
    assert truth.base.schema == BASE_SCHEMA + ('noise_1', 'noise_2')


def test_truth_table_round_trip(truth):
    small = truth.take(np.arange(50))
    again = SyntheticTruth.from_frame(small.to_frame())
    assert again.base == small.base
    np.testing.assert_array_equal(again.generator_probs, small.generator_probs)


def test_censor_keeps_named_covariates(truth):
    d = censor(truth, ('age', 'gender'))
    assert d.schema == ('age', 'gender')
    assert 'censoring=age+gender' in d.provenance
    np.testing.assert_array_equal(d.outcome, truth.base.outcome)
    with pytest.raises(ValidationError):
        censor(truth, ())


def test_truth_from_dataset(truth):
    d = censor(truth, ('age', 'prior_fta'))
    rebuilt = truth_from_dataset(d, seed=2, lambda_grid=[0.001])
    assert rebuilt.base.schema == ('age', 'prior_fta')
    assert np.all((rebuilt.generator_probs > 0) & (rebuilt.generator_probs < 1))
    assert rebuilt.t.mean() == pytest.approx(d.treatment.mean(), abs=0.05)


class TestScenarioSpec:

    def test_unknown_keys(self):
        with pytest.raises(ConfigError):
            ScenarioSpec.from_dict({'n': 10, 'colour': 'blue'})
        with pytest.raises(ConfigError):
            ScenarioSpec.from_dict({'targets': {'treatment_rate': 1.5}})

    def test_save_and_load(self, tmp_path):
        spec = ScenarioSpec(n=123, targets={'treatment_rate': 0.4, 'fta_released': 0.2, 'fta_detained': 0.1})
        path = str(tmp_path / 'scenario.json')
        spec.save(path)
        assert ScenarioSpec.load(path) == spec


def test_default_subgroups(truth):
    groups = default_subgroups()
    assert len(groups) == 10
    d = truth.base
    assert groups['all'](d).all()
    bands = sum(groups[name](d).astype(int) for name in ('age 18-24', 'age 25-34', 'age 35-44', 'age 45+'))
    assert np.all(bands == 1)
    np.testing.assert_array_equal(groups['male'](d), ~groups['female'](d))


@pytest.mark.slow
def test_ignorability_within_strata():
    truth = generate_truth(ScenarioSpec(n=50000), seed=11)
    d = truth.base
    for gender in (0, 1):
        stratum = (d.column('gender') == gender) & (d.column('prior_fta') == 0) & (d.column('age') < 30)
        corr = np.corrcoef(truth.t[stratum], truth.y0[stratum])[0, 1]
        assert abs(corr) < 0.02 + 3 / np.sqrt(stratum.sum())


@pytest.mark.slow
def test_validation_suite_small_run():
    truth = generate_truth(ScenarioSpec(n=2000), seed=5)
    spec = SensitivitySpec(K=2, sampler=SamplerConfig(chains=2, warmup_iters=150, draw_iters=100, seed=1))
    report = run_validation_suite(truth, censorings=(('age',), ('age', 'gender')), spec=spec,
                                  thresholds=(0.1, 0.2), lambda_grid=(0.001,), rr_caps={'double': 2.0})
    assert set(report.summary['censoring']) == {'age', 'age+gender'}
    assert len(report.coverage) == 4
    assert {'covered', 'rr_covered', 'width95'} <= set(report.coverage.columns)
    assert report.summary['coverage_fraction'].between(0, 1).all()


def test_status_quo_policy(truth):
    status_quo = Policy.fixed(truth.t)
    assert status_quo.release_rate == pytest.approx(0.69, abs=0.02)
    assert oracle_policy_value(truth, status_quo) == pytest.approx(0.13, abs=0.01)


@pytest.mark.slow
def test_propensity_fit_matches_bail_rate():
    truth = generate_truth(ScenarioSpec(n=20000), seed=8)
    nz = fit_nuisance(censor(truth, BASE_SCHEMA), None, lambda_grid=(0.0001, 0.001, 0.01), cv_folds=3)
    assert nz.e_hat.mean() == pytest.approx(0.31, abs=0.02)


@pytest.mark.slow
def test_validation_suite_covers_oracle_values():
    truth = generate_truth(ScenarioSpec(n=20000), seed=2)
    spec = SensitivitySpec(K=10, sampler=SamplerConfig(chains=4, warmup_iters=500, draw_iters=1000, seed=1))
    report = run_validation_suite(truth, spec=spec, eval_size=2000, lambda_grid=(0.0001, 0.001, 0.01),
                                  cv_folds=3, rr_caps={'double': 2.0}, seed=4)
    summary = report.summary.set_index('censoring')
    assert (summary['coverage_fraction'] >= 0.9).all()
    assert summary.loc['age', 'mean_width95'] > summary.loc['age+gender+prior_fta', 'mean_width95']
    assert report.subgroups['covered'].mean() >= 0.9

    age = report.coverage[report.coverage['censoring'] == 'age']
    releases_all = age[age['release_rate'] >= 0.95]
    assert (releases_all['direct_value'] <= releases_all['oracle_value']).all()
    detains_all = age[age['release_rate'] <= 0.05]
    assert (detains_all['direct_value'] >= detains_all['oracle_value']).all()
