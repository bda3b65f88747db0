from fractions import Fraction

import numpy as np
import pytest

from policy_sensitivity.exceptions import DomainError
from policy_sensitivity.synthetic import BASE_SCHEMA, ScenarioSpec, generate_truth
from policy_sensitivity.trunc_rank import (TAIL_CUTOFF, TruncatedNormal, check_monotonicity, compare_groups,
                                           mills_ratio, ranking_robustness, risk_rankings, table_one_risks,
                                           table_one_truth, truncated_mean, truncated_var)


def test_half_normal_moments():
    tn = TruncatedNormal(0.0, 1.0, 0.0)
    assert truncated_mean(tn) == pytest.approx(-np.sqrt(2 / np.pi), abs=1e-12)
    assert truncated_var(tn) == pytest.approx(1 - 2 / np.pi, abs=1e-12)
    assert truncated_var(TruncatedNormal(3.0, 2.0, 3.0)) / 4 == pytest.approx(0.36338, abs=1e-5)


def test_far_threshold_leaves_mean_unchanged():
    assert truncated_mean(TruncatedNormal(1.5, 0.7, 1.5 + 40 * 0.7)) == pytest.approx(1.5, abs=1e-12)


def test_deep_tail_is_stable():
    tn = TruncatedNormal(0.0, 1.0, -40.0)
    mean, var = truncated_mean(tn), truncated_var(tn)
    assert np.isfinite(mean) and mean < -40.0
    assert 0 < var < 1e-3


def test_mills_ratio_is_continuous_at_cutoff():
    below, above = mills_ratio(TAIL_CUTOFF - 1e-9), mills_ratio(TAIL_CUTOFF + 1e-9)
    assert below == pytest.approx(above, rel=1e-8)
    np.testing.assert_allclose(mills_ratio(np.array([-1.0, 0.0])), [1.525135, 0.797885], rtol=1e-6)


def test_sigma_must_be_positive():
    with pytest.raises(DomainError):
        TruncatedNormal(0.0, 0.0, 1.0)
    with pytest.raises(DomainError):
        TruncatedNormal(0.0, -1.0, 1.0)


def test_monotone_in_theta():
    report = check_monotonicity(1.0, 0.0, np.linspace(-5, 5, 41))
    assert report.passed
    assert report.offending_theta == []
    assert len(report.table) == 41
    with pytest.raises(DomainError):
        check_monotonicity(1.0, 0.0, [1.0, 0.0])


def test_unequal_variances_invert_ranks():
    frame = compare_groups()
    assert frame['inverted'].all()
    a, b = frame.set_index('group').loc[['A', 'B'], 'truncated_mean']
    assert a > b

    same = compare_groups({'low': (0.0, 1.0), 'high': (1.0, 1.0)})
    assert not same['inverted'].any()


def test_table_one_risks_are_exact():
    risks = table_one_risks()
    assert risks['young'] == {'true': Fraction(17, 100), 'learned': Fraction(1, 20)}
    assert risks['old'] == {'true': Fraction(1, 10), 'learned': Fraction(1, 10)}
    assert risks['inverted'] is True


def test_table_one_truth_realises_cells():
    truth = table_one_truth(1000)
    young = truth.base.column('young') == 1
    assert truth.y0[young].mean() == pytest.approx(0.17, abs=1e-12)
    assert not truth.y1.any()
    with pytest.raises(DomainError):
        table_one_truth(7)


def test_learned_ranking_inverts_on_table_one():
    truth = table_one_truth(1000)
    learned, oracle = risk_rankings(truth, ('young',), lambda_grid=(0.0,), cv_folds=2)
    young = truth.base.column('young') == 1
    assert learned[young][0] < learned[~young][0]
    assert oracle[young][0] > oracle[~young][0]


def test_ranking_robustness_endpoints(truth):
    frame = ranking_robustness(truth, ('age', 'gender'), (0.0, 0.5, 1.0), lambda_grid=[0.001], cv_folds=2)
    assert list(frame['quantile']) == [0.0, 0.5, 1.0]
    for p in (0.0, 1.0):
        row = frame[frame['quantile'] == p].iloc[0]
        assert row['learned_value'] == row['oracle_value']


@pytest.mark.slow
def test_truncated_moments_match_rejection_sampling():
    tn = TruncatedNormal(1.0, 2.0, 0.5)
    draws = np.random.default_rng(0).normal(1.0, 2.0, 10 ** 7)
    kept = draws[draws < 0.5]
    se = kept.std() / np.sqrt(len(kept))
    assert abs(kept.mean() - truncated_mean(tn)) < 3 * se
    assert kept.var() == pytest.approx(truncated_var(tn), rel=1e-2)


@pytest.mark.slow
def test_learned_ranking_is_near_optimal_with_full_schema():
    truth = generate_truth(ScenarioSpec(n=50000), seed=13)
    frame = ranking_robustness(truth, BASE_SCHEMA, np.linspace(0.0, 1.0, 21), lambda_grid=(0.0001, 0.001),
                               cv_folds=3)
    assert (frame['learned_value'] - frame['oracle_value']).abs().max() <= 0.02
