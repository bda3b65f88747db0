import json
import os

import numpy as np
import pandas as pd
import pytest

from policy_sensitivity.data import Dataset
from policy_sensitivity.exceptions import (ArtifactIOError, MissingArtifactError, ParseError, SchemaError,
                                           ValidationError)
from policy_sensitivity.files import ArtifactStore, load_dataset, read_results, write_dataset, write_results

WELL_FORMED = """id,treatment,outcome,age,gender
1,0,1,23,1
2,1,0,41,0
3,0,0,35,1
4,1,1,19,1
"""


def write_text(path, text):
    path.write_text(text, encoding='utf-8')
    return str(path)


def test_load_well_formed(tmp_path):
    d = load_dataset(write_text(tmp_path / 'd.csv', WELL_FORMED), ('age', 'gender'))
    assert len(d) == 4
    assert list(d.ids) == [1, 2, 3, 4]
    assert list(d.column('age')) == [23.0, 41.0, 35.0, 19.0]
    assert list(d.treatment) == [0, 1, 0, 1]


def test_load_accepts_any_column_order(tmp_path):
    text = 'gender,outcome,id,age,treatment\n1,1,7,30,0\n'
    d = load_dataset(write_text(tmp_path / 'd.csv', text), ('age', 'gender'))
    assert d.schema == ('age', 'gender')
    assert list(d.covariates[0]) == [30.0, 1.0]


def test_non_binary_treatment_names_row(tmp_path):
    text = WELL_FORMED.replace('3,0,0,35,1', '3,2,0,35,1')
    with pytest.raises(ValidationError, match='Row 3'):
        load_dataset(write_text(tmp_path / 'd.csv', text), ('age', 'gender'))


def test_unparseable_cell_names_row_and_column(tmp_path):
    text = WELL_FORMED.replace('2,1,0,41,0', '2,1,0,forty,0')
    with pytest.raises(ParseError) as excinfo:
        load_dataset(write_text(tmp_path / 'd.csv', text), ('age', 'gender'))
    assert excinfo.value.params == {'row': 2, 'column': 'age', 'value': 'forty'}


def test_large_ids_are_exact(tmp_path):
    text = 'id,treatment,outcome,age,gender\n9007199254740993,0,1,23,1\n9007199254740992,1,0,41,0\n'
    d = load_dataset(write_text(tmp_path / 'd.csv', text), ('age', 'gender'))
    assert d.ids.tolist() == [2 ** 53 + 1, 2 ** 53]


@pytest.mark.parametrize('value', ['2.5', '2.0', '1e3', '99999999999999999999'])
def test_non_integer_id(tmp_path, value):
    text = WELL_FORMED.replace('2,1,0,41,0', value + ',1,0,41,0')
    with pytest.raises(ParseError) as excinfo:
        load_dataset(write_text(tmp_path / 'd.csv', text), ('age', 'gender'))
    assert excinfo.value.params == {'row': 2, 'column': 'id', 'value': value}


def test_header_mismatch(tmp_path):
    path = write_text(tmp_path / 'd.csv', WELL_FORMED)
    with pytest.raises(SchemaError, match='Missing columns: prior_fta'):
        load_dataset(path, ('age', 'gender', 'prior_fta'))
    with pytest.raises(SchemaError, match='Unexpected columns: gender'):
        load_dataset(path, ('age',))


def test_missing_file(tmp_path):
    with pytest.raises(ArtifactIOError):
        load_dataset(str(tmp_path / 'absent.csv'), ('age',))


def test_write_then_load_round_trip(tmp_path):
    rng = np.random.default_rng(5)
    n = 100
    d = Dataset(('a', 'b', 'c'), rng.permutation(n) + 1, rng.standard_normal((n, 3)) * 1e3,
                rng.integers(0, 2, n), rng.integers(0, 2, n))
    path = str(tmp_path / 'd.csv')
    write_dataset(d, path)
    again = load_dataset(path, ('a', 'b', 'c'))
    assert again == d


def test_empty_results_table_is_header_only(tmp_path):
    path = str(tmp_path / 'r.csv')
    write_results(pd.DataFrame(columns=['threshold', 'release_rate', 'value']), path)
    with open(path, encoding='utf-8') as fh:
        assert fh.read() == 'threshold,release_rate,value\n'


def test_results_keep_row_order_and_precision(tmp_path):
    path = str(tmp_path / 'r.csv')
    table = {'threshold': [0.3, 0.1], 'release_rate': [0.9, 0.2], 'value': [1 / 3, 2 / 7]}
    write_results(table, path)
    frame = read_results(path)
    assert list(frame.columns) == ['threshold', 'release_rate', 'value']
    assert frame['value'].tolist() == [1 / 3, 2 / 7]
    assert frame['threshold'].tolist() == [0.3, 0.1]


class TestArtifactStore:

    def test_require_names_producing_command(self, tmp_path):
        store = ArtifactStore(tmp_path)
        with pytest.raises(MissingArtifactError, match='policy-sensitivity fit-nuisance'):
            store.require('nuisance.csv')

    def test_arrays_are_byte_identical_across_writes(self, tmp_path):
        store = ArtifactStore(tmp_path)
        arrays = {'draws': np.arange(12.0).reshape(2, 3, 2), 'status': np.asarray('clean')}
        first = open(store.save_arrays('a.npz', **arrays), 'rb').read()
        second = open(store.save_arrays('a.npz', **arrays), 'rb').read()
        assert first == second
        loaded = store.load_arrays('a.npz')
        np.testing.assert_array_equal(loaded['draws'], arrays['draws'])
        assert str(loaded['status']) == 'clean'

    def test_manifest(self, tmp_path):
        store = ArtifactStore(tmp_path)
        store.write_manifest('synth', {'seed': 1}, ['truth.csv'])
        path = os.path.join(str(tmp_path), 'manifests', 'synth.json')
        with open(path, encoding='utf-8') as fh:
            manifest = json.load(fh)
        assert manifest['outputs'] == ['truth.csv']
        assert len(manifest['config_hash']) == 64
        assert 'numpy' in manifest['versions']

    def test_collect_stacks_tables(self, tmp_path):
        store = ArtifactStore(tmp_path)
        store.write_results('a.csv', {'x': [1, 2]})
        store.write_results('b.csv', {'y': [3.5]})
        stacked = store.collect(['a.csv', 'b.csv'])
        assert stacked['artifact'].tolist() == ['a.csv', 'a.csv', 'b.csv']
        assert set(stacked.columns) == {'artifact', 'x', 'y'}

    def test_json_writes_null_for_non_finite(self, tmp_path):
        store = ArtifactStore(tmp_path)
        path = store.write_json('report.json', {'max_rhat': float('nan'), 'ess': np.array([1.5, np.inf]),
                                                'rate': np.float64(0.25)})
        with open(path, encoding='utf-8') as fh:
            text = fh.read()
        assert 'NaN' not in text and 'Infinity' not in text
        assert store.read_json('report.json') == {'max_rhat': None, 'ess': [1.5, None], 'rate': 0.25}
