"""
Sensitivity sweep with a binary unmeasured confounder.

The confounder ``u`` is independent of the covariates with Pr(u=1) = p and
multiplies the odds of treatment by ``gamma`` and the odds of failure in arm t
by ``delta_t``. Per-unit intercepts are calibrated so the model reproduces the
fitted nuisance probabilities; the missing potential outcome is then imputed
under the posterior of ``u`` given everything observed for the unit.
"""
import logging
from dataclasses import dataclass
from itertools import product
from typing import Dict, Sequence

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy import special

from .conf import get_threads
from .data import Dataset
from .exceptions import DomainError, ValidationError
from .glm import NuisanceEstimates
from .policy import Policy, direct_policy_value

logger = logging.getLogger(__name__)

BISECTION_STEPS = 100
RESIDUAL_TOLERANCE = 1e-8
P_VALUES = tuple(round(0.1 * i, 1) for i in range(1, 10))
MULTIPLIER_POINTS = 5
REGIMES = {"double": 2.0, "triple": 3.0}


@dataclass(frozen=True)
class RRParams:
    p: float
    gamma: float
    delta0: float
    delta1: float

    def __post_init__(self):
        if not 0.0 < self.p < 1.0:
            raise DomainError(f"Prevalence p must lie in (0, 1), got {self.p!r}.")
        for name in ("gamma", "delta0", "delta1"):
            if not getattr(self, name) >= 1.0:
                raise DomainError(f"Odds multiplier {name} must be at least 1, got {getattr(self, name)!r}.")

    def as_dict(self, prefix=""):
        return {f"{prefix}p": self.p, f"{prefix}gamma": self.gamma,
                f"{prefix}delta0": self.delta0, f"{prefix}delta1": self.delta1}


@dataclass(frozen=True)
class RRGrid:
    p_values: tuple
    gamma_values: tuple
    delta0_values: tuple
    delta1_values: tuple

    def __post_init__(self):
        for name in ("p_values", "gamma_values", "delta0_values", "delta1_values"):
            values = tuple(sorted(float(v) for v in getattr(self, name)))
            if not values:
                raise ValidationError(f"RR grid {name} is empty.")
            object.__setattr__(self, name, values)

    @classmethod
    def regime(cls, cap, lower_caps=(), p_values=P_VALUES, points=MULTIPLIER_POINTS):
        """
        Multipliers log-spaced from 1 to ``cap``, merged with those of every
        lower regime so that grids of increasing caps are nested.
        """
        multipliers = set()
        for c in (*lower_caps, cap):
            if c < 1.0:
                raise DomainError(f"Regime cap must be at least 1, got {c!r}.")
            multipliers.update(float(m) for m in np.geomspace(1.0, c, points))
        multipliers = tuple(sorted(multipliers))
        return cls(tuple(p_values), multipliers, multipliers, multipliers)

    @classmethod
    def regimes(cls, caps: Dict[str, float] = None):
        caps = REGIMES if caps is None else caps
        ordered = sorted(caps.items(), key=lambda item: item[1])
        return {name: cls.regime(cap, [c for _, c in ordered if c < cap]) for name, cap in ordered}

    @property
    def size(self):
        return len(self.p_values) * len(self.gamma_values) * len(self.delta0_values) * len(self.delta1_values)

    def points(self):
        for p, gamma, delta0, delta1 in product(self.p_values, self.gamma_values, self.delta0_values,
                                                self.delta1_values):
            yield RRParams(p, gamma, delta0, delta1)


def _mixture(intercept, shift, weight):
    # Pr = weight * expit(intercept + shift) + (1 - weight) * expit(intercept)
    return weight * special.expit(intercept + shift) + (1.0 - weight) * special.expit(intercept)


def _calibrate_intercept(target, shift, weight):
    """
    Solves _mixture(a, shift, weight) = target for every unit by bisection on
    [logit(target) - shift, logit(target)].
    """
    hi = special.logit(target)
    lo = hi - shift
    for _ in range(BISECTION_STEPS):
        mid = 0.5 * (lo + hi)
        below = _mixture(mid, shift, weight) < target
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    return 0.5 * (lo + hi)


@dataclass
class RRCalibration:
    """
    Calibrated per-unit intercepts for the treatment model (``a``) and both
    outcome arms, plus Pr(u=1 | x, t) for the recorded t.
    """
    params: RRParams
    a: np.ndarray
    b0: np.ndarray
    b1: np.ndarray
    post_u_treated: np.ndarray
    post_u_untreated: np.ndarray
    flagged: int = 0

    def treatment_probability(self):
        return _mixture(self.a, np.log(self.params.gamma), self.params.p)


def calibrate(nz: NuisanceEstimates, params: RRParams) -> RRCalibration:
    log_gamma = np.log(params.gamma)
    a = _calibrate_intercept(nz.e_hat, log_gamma, params.p)
    treated_u1 = params.p * special.expit(a + log_gamma)
    treated_u0 = (1.0 - params.p) * special.expit(a)
    post_treated = treated_u1 / (treated_u1 + treated_u0)
    untreated_u1 = params.p * special.expit(-(a + log_gamma))
    untreated_u0 = (1.0 - params.p) * special.expit(-a)
    post_untreated = untreated_u1 / (untreated_u1 + untreated_u0)

    b0 = _calibrate_intercept(nz.mu0_hat, np.log(params.delta0), post_untreated)
    b1 = _calibrate_intercept(nz.mu1_hat, np.log(params.delta1), post_treated)
    calibration = RRCalibration(params, a, b0, b1, post_treated, post_untreated)

    residuals = np.maximum.reduce([
        np.abs(calibration.treatment_probability() - nz.e_hat),
        np.abs(_mixture(b0, np.log(params.delta0), post_untreated) - nz.mu0_hat),
        np.abs(_mixture(b1, np.log(params.delta1), post_treated) - nz.mu1_hat),
    ])
    calibration.flagged = int(np.sum(residuals > RESIDUAL_TOLERANCE))
    if calibration.flagged:
        logger.warning("%d units could not be calibrated under %s; clamped values used",
                       calibration.flagged, params)
    return calibration


def impute_missing(d: Dataset, nz: NuisanceEstimates, calibration: RRCalibration):
    """
    Expected unobserved potential outcome of every unit under Pr(u | x, t, y).
    """
    params = calibration.params
    treated = d.treatment == 1
    y = d.outcome.astype(float)
    prior_u1 = np.where(treated, calibration.post_u_treated, calibration.post_u_untreated)
    observed_b = np.where(treated, calibration.b1, calibration.b0)
    observed_shift = np.where(treated, np.log(params.delta1), np.log(params.delta0))
    p_y_u1 = special.expit(observed_b + observed_shift)
    p_y_u0 = special.expit(observed_b)
    like_u1 = np.where(y == 1, p_y_u1, 1.0 - p_y_u1)
    like_u0 = np.where(y == 1, p_y_u0, 1.0 - p_y_u0)
    post_u1 = prior_u1 * like_u1 / (prior_u1 * like_u1 + (1.0 - prior_u1) * like_u0)

    missing_b = np.where(treated, calibration.b0, calibration.b1)
    missing_shift = np.where(treated, np.log(params.delta0), np.log(params.delta1))
    return post_u1 * special.expit(missing_b + missing_shift) + (1.0 - post_u1) * special.expit(missing_b)


def _policy_values(d: Dataset, decisions, imputed):
    # decisions: policies x units
    agree = decisions == d.treatment[None, :]
    observed = np.where(agree, d.outcome[None, :], 0.0).sum(axis=1)
    return (observed + np.where(agree, 0.0, imputed[None, :]).sum(axis=1)) / d.n


def rr_adjusted_value(d: Dataset, nz: NuisanceEstimates, pi: Policy, params: RRParams) -> float:
    nz.check_aligned(d)
    pi.check_aligned(len(d))
    imputed = impute_missing(d, nz, calibrate(nz, params))
    return float(_policy_values(d, pi.decisions[None, :], imputed)[0])


def _evaluate_chunk(d, nz, decisions, points):
    return np.stack([_policy_values(d, decisions, impute_missing(d, nz, calibrate(nz, params)))
                     for params in points])


def rr_sweep(d: Dataset, nz: NuisanceEstimates, policies: Sequence[Policy], grid: RRGrid, regime="",
             n_jobs=None) -> pd.DataFrame:
    """
    Evaluates every policy at every grid point and reports the per-policy
    envelope with the parameters attaining its ends.
    """
    nz.check_aligned(d)
    if not policies:
        raise ValidationError("rr_sweep needs at least one policy.")
    for pi in policies:
        pi.check_aligned(len(d))
    decisions = np.stack([pi.decisions for pi in policies])
    points = list(grid.points())
    workers = min(get_threads(n_jobs), len(points))
    bounds = np.linspace(0, len(points), workers + 1).astype(int)
    logger.info("RR sweep %s: %d grid points x %d policies", regime or "(unnamed)", len(points), len(policies))
    results = Parallel(n_jobs=workers, prefer="threads")(
        delayed(_evaluate_chunk)(d, nz, decisions, points[lo:hi]) for lo, hi in zip(bounds[:-1], bounds[1:]))
    values = np.concatenate(results, axis=0)

    lowest = values.argmin(axis=0)
    highest = values.argmax(axis=0)
    rows = []
    for j, pi in enumerate(policies):
        row = {
            "threshold": pi.cutoff,
            "release_rate": pi.release_rate,
            "direct_value": direct_policy_value(d, pi, nz).value,
            "rr_min": float(values[lowest[j], j]),
            "rr_max": float(values[highest[j], j]),
            "regime": regime,
        }
        row.update(points[lowest[j]].as_dict("argmin_"))
        row.update(points[highest[j]].as_dict("argmax_"))
        rows.append(row)
    return pd.DataFrame(rows)


def rr_sweep_regimes(d, nz, policies, caps: Dict[str, float] = None, n_jobs=None) -> pd.DataFrame:
    frames = [rr_sweep(d, nz, policies, grid, regime=name, n_jobs=n_jobs)
              for name, grid in RRGrid.regimes(caps).items()]
    return pd.concat(frames, ignore_index=True)
