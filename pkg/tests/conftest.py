import numpy as np
import pytest

from policy_sensitivity.data import Dataset
from policy_sensitivity.synthetic import ScenarioSpec, generate_truth


@pytest.fixture(scope='session')
def truth():
    return generate_truth(ScenarioSpec(n=3000), seed=7)


@pytest.fixture
def make_dataset():
    """
    Builds a dataset from plain lists; covariates default to one column ``x``.
    """
    def build(treatment, outcome, covariates=None, schema=('x',), ids=None):
        n = len(treatment)
        ids = np.arange(1, n + 1) if ids is None else ids
        if covariates is None:
            covariates = np.linspace(0.0, 1.0, n)[:, None]
        return Dataset(schema, ids, np.asarray(covariates, dtype=float).reshape(n, len(schema)),
                       treatment, outcome)
    return build


@pytest.fixture
def logistic_data(make_dataset):
    """
    n units with three standard normal covariates and logistic outcome and
    treatment models.
    """
    def build(n=200, seed=0, coefficients=(1.0, -1.0, 0.5), propensity=(0.5, 0.0, 0.0)):
        rng = np.random.default_rng(seed)
        X = rng.standard_normal((n, 3))
        y = (rng.random(n) < 1.0 / (1.0 + np.exp(-(X @ np.asarray(coefficients) - 0.5)))).astype(int)
        t = (rng.random(n) < 1.0 / (1.0 + np.exp(-(X @ np.asarray(propensity))))).astype(int)
        return make_dataset(t, y, X, schema=('x1', 'x2', 'x3'))
    return build


def pytest_configure():
    from django.conf import settings

    settings.configure(
        POLICY_SENSITIVITY_THREADS=1,
        POLICY_SENSITIVITY_PROBABILITY_EPS=1e-6,
        POLICY_SENSITIVITY_CD_TOL=1e-10,
    )
