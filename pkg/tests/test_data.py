import numpy as np
import pytest

from policy_sensitivity.data import CaseRecord, Dataset, split_folds
from policy_sensitivity.exceptions import DomainError, InsufficientDataError, SchemaError, ValidationError


def test_split_sizes_follow_floor_rule(make_dataset):
    d = make_dataset([0] * 10, [0] * 10)
    for seed in (0, 1, 99):
        assert split_folds(d, seed, (0.5, 0.3, 0.2)).sizes == (5, 3, 2)


def test_split_is_a_deterministic_partition():
    rng = np.random.default_rng(3)
    for n in (3, 17, 1000, 10000):
        ids = rng.choice(10 ** 6, size=n, replace=False)
        d = Dataset(('x',), ids, rng.random((n, 1)), rng.integers(0, 2, n), rng.integers(0, 2, n))
        split = split_folds(d, seed=11)
        assert split == split_folds(d, seed=11)
        folds = (split.policy_fold, split.nuisance_fold, split.eval_fold)
        assert set().union(*folds) == set(int(i) for i in ids)
        assert sum(len(f) for f in folds) == n


def test_different_seeds_give_different_splits(make_dataset):
    d = make_dataset([0] * 200, [0] * 200)
    assert split_folds(d, 1) != split_folds(d, 2)


def test_split_with_fixed_eval_size_halves_remainder():
    n = 165055
    d = Dataset(('x',), np.arange(n), np.zeros((n, 1)), np.zeros(n, dtype=int), np.zeros(n, dtype=int))
    split = split_folds(d, 0, (0.45, 0.45, 0.10), eval_size=10000)
    policy, nuisance, evaluation = split.sizes
    assert evaluation == 10000
    assert {policy, nuisance} == {77527, 77528}


def test_split_rejects_bad_input(make_dataset):
    with pytest.raises(InsufficientDataError):
        split_folds(make_dataset([0, 1], [1, 0]), 0)
    d = make_dataset([0] * 10, [0] * 10)
    with pytest.raises(DomainError):
        split_folds(d, 0, (0.5, 0.5, 0.5))
    with pytest.raises(DomainError):
        split_folds(d, 0, (0.5, 0.5, 0.0))


def test_fold_labels(make_dataset):
    d = make_dataset([0] * 20, [0] * 20)
    split = split_folds(d, 4)
    labels = split.labels(d)
    assert (labels == 'eval').sum() == len(split.eval_fold)
    assert set(d.ids[labels == 'policy']) == split.policy_fold


def test_dataset_rejects_invalid_rows(make_dataset):
    with pytest.raises(ValidationError, match='Row 3'):
        make_dataset([0, 1, 2, 0], [0, 0, 0, 0])
    with pytest.raises(ValidationError, match='not unique'):
        make_dataset([0, 1], [0, 1], ids=[5, 5])
    with pytest.raises(ValidationError, match='missing'):
        make_dataset([0, 1], [0, 1], covariates=[[0.0], [np.nan]])
    with pytest.raises(SchemaError):
        Dataset(('id',), [1], [[0.0]], [0], [0])


def test_records_round_trip(make_dataset):
    d = make_dataset([0, 1, 1], [1, 0, 1])
    again = Dataset.from_records(d.schema, d.records)
    assert again == d
    assert list(again.records)[1] == CaseRecord(id=2, covariates=(0.5,), treatment=1, outcome=0)


def test_subset_and_restrict_keep_row_order(make_dataset):
    d = make_dataset([0, 1, 0, 1], [1, 1, 0, 0], covariates=np.arange(8.0).reshape(4, 2), schema=('a', 'b'))
    sub = d.subset([4, 2])
    assert list(sub.ids) == [2, 4]
    narrow = d.restrict(['b'])
    assert narrow.schema == ('b',)
    assert list(narrow.column('b')) == [1.0, 3.0, 5.0, 7.0]
    with pytest.raises(SchemaError):
        d.restrict(['c'])


def test_columns_are_read_only(make_dataset):
    d = make_dataset([0, 1], [1, 0])
    with pytest.raises(ValueError):
        d.outcome[0] = 0
