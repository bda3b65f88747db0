"""
Right-truncated normal moments and the ranking experiments built on them.

Judges who release a defendant iff the risk they perceive is below a threshold
leave behind released populations whose observed risk is a truncated mean. With
equal variances the truncated mean preserves the order of the underlying means,
so rankings learned from released units match oracle rankings; with unequal
variances they can invert.
"""
import logging
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import special

from .data import Dataset
from .exceptions import DomainError
from .glm import fit_cv_lasso, predict
from .policy import Policy, oracle_policy_value

logger = logging.getLogger(__name__)

TAIL_CUTOFF = -8.0
CONTINUED_FRACTION_TERMS = 40

# two groups whose truncated means invert their underlying means at s = 1
COUNTEREXAMPLE_GROUPS = {"A": (0.0, 0.5), "B": (0.5, 3.0)}
COUNTEREXAMPLE_THRESHOLD = 1.0


def _tail_excess(x):
    """
    1 / (x + 2 / (x + 3 / (x + ...))) for large positive x, evaluated backwards.
    """
    tail = np.zeros_like(x)
    for j in range(CONTINUED_FRACTION_TERMS, 1, -1):
        tail = j / (x + tail)
    return 1.0 / (x + tail)


def mills_ratio(beta):
    """
    phi(beta) / Phi(beta), switching to a continued fraction below beta = -8.
    """
    beta = np.asarray(beta, dtype=float)
    ratio = np.empty_like(beta)
    deep = beta < TAIL_CUTOFF
    regular = ~deep
    ratio[regular] = np.exp(-0.5 * beta[regular] ** 2 - 0.5 * np.log(2.0 * np.pi) - special.log_ndtr(beta[regular]))
    x = -beta[deep]
    ratio[deep] = x + _tail_excess(x)
    return ratio if ratio.ndim else float(ratio)


def _variance_ratio(beta):
    # 1 - beta*r - r^2, rewritten as 1 - r*delta in the tail to avoid cancellation
    beta = np.asarray(beta, dtype=float)
    ratio = np.asarray(mills_ratio(beta), dtype=float)
    out = 1.0 - beta * ratio - ratio ** 2
    deep = beta < TAIL_CUTOFF
    if np.any(deep):
        out = np.where(deep, 1.0 - ratio * _tail_excess(np.where(deep, -beta, 1.0)), out)
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class TruncatedNormal:
    """
    N(theta, sigma^2) conditioned on lying below ``s``.
    """
    theta: float
    sigma: float
    s: float

    def __post_init__(self):
        if not self.sigma > 0:
            raise DomainError(f"sigma must be positive, got {self.sigma!r}.")

    @property
    def beta(self):
        return (self.s - self.theta) / self.sigma


def truncated_mean(tn: TruncatedNormal) -> float:
    return float(tn.theta - tn.sigma * mills_ratio(tn.beta))


def truncated_var(tn: TruncatedNormal) -> float:
    return float(tn.sigma ** 2 * _variance_ratio(tn.beta))


@dataclass
class MonotonicityReport:
    sigma: float
    s: float
    increasing: bool
    derivative_ok: bool
    max_derivative_error: float
    offending_theta: list = field(default_factory=list)
    table: pd.DataFrame = None

    @property
    def passed(self):
        return self.increasing and self.derivative_ok


def check_monotonicity(sigma, s, theta_grid, step=1e-6, tol=1e-6) -> MonotonicityReport:
    """
    Checks that the truncated mean strictly increases along ``theta_grid`` and
    that its derivative in theta equals truncated_var / sigma^2.
    """
    thetas = np.asarray(theta_grid, dtype=float)
    if np.any(np.diff(thetas) <= 0):
        raise DomainError("theta_grid must be strictly increasing.")
    means = np.array([truncated_mean(TruncatedNormal(t, sigma, s)) for t in thetas])
    upper = np.array([truncated_mean(TruncatedNormal(t + step, sigma, s)) for t in thetas])
    lower = np.array([truncated_mean(TruncatedNormal(t - step, sigma, s)) for t in thetas])
    derivative = (upper - lower) / (2.0 * step)
    identity = np.array([truncated_var(TruncatedNormal(t, sigma, s)) for t in thetas]) / sigma ** 2
    error = np.abs(derivative - identity) / np.maximum(np.abs(identity), 1e-300)

    offending = [float(t) for t in thetas[1:][np.diff(means) <= 0]]
    offending += [float(t) for t in thetas[error > tol] if float(t) not in offending]
    report = MonotonicityReport(
        sigma=float(sigma),
        s=float(s),
        increasing=bool(np.all(np.diff(means) > 0)),
        derivative_ok=bool(np.all(error <= tol)),
        max_derivative_error=float(error.max()),
        offending_theta=offending,
        table=pd.DataFrame({"theta": thetas, "truncated_mean": means, "derivative": derivative,
                            "variance_ratio": identity, "relative_error": error}),
    )
    if not report.passed:
        logger.warning("Monotonicity check failed at theta=%s", offending[:5])
    return report


def compare_groups(groups: Dict[str, Tuple[float, float]] = None, s=COUNTEREXAMPLE_THRESHOLD) -> pd.DataFrame:
    """
    Ranks groups by theta and by truncated mean. ``inverted`` marks groups whose
    two ranks differ.
    """
    groups = COUNTEREXAMPLE_GROUPS if groups is None else groups
    names = list(groups)
    thetas = np.array([groups[g][0] for g in names], dtype=float)
    sigmas = np.array([groups[g][1] for g in names], dtype=float)
    means = np.array([truncated_mean(TruncatedNormal(t, sg, s)) for t, sg in zip(thetas, sigmas)])
    frame = pd.DataFrame({
        "group": names,
        "theta": thetas,
        "sigma": sigmas,
        "truncated_mean": means,
        "theta_rank": pd.Series(thetas).rank(method="min").astype(int),
        "truncated_rank": pd.Series(means).rank(method="min").astype(int),
    })
    frame["inverted"] = frame["theta_rank"] != frame["truncated_rank"]
    return frame


@dataclass(frozen=True)
class PopulationCell:
    age: str
    gender: str
    share: Fraction
    bail: int
    mu0: Fraction


def table_one_population():
    """
    The four-cell population where judges bail only young men.
    """
    return (
        PopulationCell("young", "M", Fraction(4, 10), 1, Fraction(2, 10)),
        PopulationCell("young", "W", Fraction(1, 10), 0, Fraction(5, 100)),
        PopulationCell("old", "M", Fraction(4, 10), 0, Fraction(1, 10)),
        PopulationCell("old", "W", Fraction(1, 10), 0, Fraction(1, 10)),
    )


def table_one_risks(cells=None):
    """
    Exact risks by age: the true flight risk if released, and the risk one
    would learn from released defendants alone.
    """
    cells = table_one_population() if cells is None else cells
    risks = {}
    for age in ("young", "old"):
        members = [c for c in cells if c.age == age]
        released = [c for c in members if c.bail == 0]
        true = sum(c.share * c.mu0 for c in members) / sum(c.share for c in members)
        learned = sum(c.share * c.mu0 for c in released) / sum(c.share for c in released)
        risks[age] = {"true": true, "learned": learned}
    risks["inverted"] = (risks["young"]["true"] > risks["old"]["true"]) != \
                        (risks["young"]["learned"] > risks["old"]["learned"])
    return risks


def table_one_truth(n=1000):
    """
    Realises the four-cell population as n units with exactly the cell rates
    of y(0). Bail prevents every failure to appear, so y(1) = 0.
    """
    from .synthetic import SyntheticTruth

    cells = table_one_population()
    young, male, t, y0 = [], [], [], []
    for cell in cells:
        size = cell.share * n
        failures = size * cell.mu0
        if size.denominator != 1 or failures.denominator != 1:
            raise DomainError(f"n={n} does not realise the cell rates exactly.")
        size, failures = int(size), int(failures)
        young += [1.0 if cell.age == "young" else 0.0] * size
        male += [1.0 if cell.gender == "M" else 0.0] * size
        t += [cell.bail] * size
        y0 += [1] * failures + [0] * (size - failures)
    ids = np.arange(1, n + 1)
    t = np.asarray(t, dtype=np.int8)
    y0 = np.asarray(y0, dtype=np.int8)
    y1 = np.zeros(n, dtype=np.int8)
    base = Dataset(("young", "male"), ids, np.column_stack([young, male]), t, np.where(t == 1, y1, y0),
                   provenance="four-cell population")
    probs = np.column_stack([y0.astype(float), y1.astype(float), t.astype(float)])
    return SyntheticTruth(base=base, y0=y0, y1=y1, t=t, generator_probs=probs, seed=None)


def risk_rankings(truth, keep: Sequence[str], lambda_grid=None, cv_folds=5, seed=0, n_jobs=None):
    """
    Risk scores for every unit from two models on the censored covariates: one
    fit on released units' observed outcomes, one fit on y(0) for everyone.
    """
    censored = truth.base.restrict(keep)
    learned_fit = fit_cv_lasso(censored, "outcome", censored.treatment == 0, lambda_grid, cv_folds, seed, n_jobs)
    oracle_data = censored.with_outcome(truth.y0)
    oracle_fit = fit_cv_lasso(oracle_data, "outcome", None, lambda_grid, cv_folds, seed, n_jobs)
    return predict(learned_fit, censored), predict(oracle_fit, censored)


def ranking_robustness(truth, keep: Sequence[str], quantile_grid, lambda_grid=None, cv_folds=5, seed=0,
                       n_jobs=None) -> pd.DataFrame:
    """
    Oracle values of quantile policies ranked by the learned and by the oracle
    risk model.
    """
    learned, oracle = risk_rankings(truth, keep, lambda_grid, cv_folds, seed, n_jobs)
    ids = truth.base.ids
    rows = []
    for p in sorted(quantile_grid):
        learned_policy = Policy.quantile(learned, p, ids)
        oracle_policy = Policy.quantile(oracle, p, ids)
        rows.append({
            "quantile": float(p),
            "release_rate": learned_policy.release_rate,
            "learned_value": oracle_policy_value(truth, learned_policy),
            "oracle_value": oracle_policy_value(truth, oracle_policy),
        })
    frame = pd.DataFrame(rows, columns=["quantile", "release_rate", "learned_value", "oracle_value"])
    logger.info("Ranking robustness on %s: max |learned - oracle| = %.4f", ",".join(keep),
                (frame["learned_value"] - frame["oracle_value"]).abs().max())
    return frame
