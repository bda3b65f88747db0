"""
Threshold and quantile release policies, the direct policy-value estimator and
subgroup treatment effects through the policy-value identity.

A decision of 1 means "set bail" (treat); 0 means release.
"""
import logging
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
import pandas as pd

from .data import Dataset
from .exceptions import AlignmentError, DomainError, EmptyGroupError, ValidationError
from .glm import NuisanceEstimates

logger = logging.getLogger(__name__)

THRESHOLD = "threshold"
QUANTILE = "quantile"
FIXED = "fixed"


def _rank_order(scores, ids):
    # ascending by score, ties broken by ascending id
    return np.lexsort((ids, scores))


@dataclass(frozen=True)
class Policy:
    """
    A deterministic treatment rule realised on a fixed set of units.

    ``decisions`` is the per-unit action vector; threshold and quantile policies
    also keep the risk scores and cutoff they were built from.
    """
    decisions: np.ndarray
    mode: str = FIXED
    cutoff: Optional[float] = None
    risk_scores: Optional[np.ndarray] = None

    @classmethod
    def threshold(cls, risk_scores, s):
        """
        Treats a unit iff its risk score is strictly above ``s``.
        """
        if not 0.0 <= s <= 1.0:
            raise DomainError(f"Threshold must lie in [0, 1], got {s!r}.")
        scores = np.asarray(risk_scores, dtype=float)
        decisions = (scores > s).astype(np.int8)
        decisions.setflags(write=False)
        return cls(decisions=decisions, mode=THRESHOLD, cutoff=float(s), risk_scores=scores)

    @classmethod
    def quantile(cls, risk_scores, p, ids=None):
        """
        Releases exactly floor(p * n) units, the lowest-risk ones by (score, id).
        """
        if not 0.0 <= p <= 1.0:
            raise DomainError(f"Release quantile must lie in [0, 1], got {p!r}.")
        scores = np.asarray(risk_scores, dtype=float)
        n = scores.size
        ids = np.arange(n) if ids is None else np.asarray(ids)
        n_release = int(np.floor(p * n + 1e-9))
        decisions = np.ones(n, dtype=np.int8)
        decisions[_rank_order(scores, ids)[:n_release]] = 0
        decisions.setflags(write=False)
        return cls(decisions=decisions, mode=QUANTILE, cutoff=float(p), risk_scores=scores)

    @classmethod
    def fixed(cls, decisions):
        decisions = np.asarray(decisions).astype(np.int8)
        if np.any((decisions != 0) & (decisions != 1)):
            raise ValidationError("Policy decisions must be 0 or 1.")
        decisions.setflags(write=False)
        return cls(decisions=decisions, mode=FIXED)

    def __len__(self):
        return int(self.decisions.shape[0])

    @property
    def release_rate(self):
        return float(np.mean(self.decisions == 0)) if len(self) else 0.0

    @property
    def effective_threshold(self):
        """
        The score cutoff the decisions correspond to: ``cutoff`` for threshold
        policies, the largest released score for quantile policies.
        """
        if self.mode == THRESHOLD:
            return self.cutoff
        if self.mode == QUANTILE:
            released = self.risk_scores[self.decisions == 0]
            return float(released.max()) if released.size else float("-inf")
        return None

    def check_aligned(self, n, what="Policy"):
        if len(self) != n:
            raise AlignmentError(what=what, got=len(self), expected=n)


@dataclass(frozen=True)
class PolicyValueEstimate:
    value: float
    n_agree: int
    n_disagree: int
    release_rate: float


def make_policy_family(risk_scores, thresholds: Sequence[float]):
    """
    One threshold policy per threshold, ordered by threshold.
    """
    if len(thresholds) == 0:
        raise ValidationError("A policy family needs at least one threshold.")
    return [Policy.threshold(risk_scores, float(s)) for s in sorted(thresholds)]


def make_quantile_family(risk_scores, quantiles: Sequence[float], ids=None):
    if len(quantiles) == 0:
        raise ValidationError("A policy family needs at least one quantile.")
    return [Policy.quantile(risk_scores, float(p), ids) for p in sorted(quantiles)]


def direct_policy_value(d: Dataset, pi: Policy, nz: NuisanceEstimates) -> PolicyValueEstimate:
    """
    Observed outcomes where the policy agrees with the recorded treatment,
    outcome-model imputations where it does not.
    """
    nz.check_aligned(d)
    pi.check_aligned(len(d))
    decisions = pi.decisions
    agree = decisions == d.treatment
    imputed = np.where(decisions == 0, nz.mu0_hat, nz.mu1_hat)
    total = d.outcome[agree].sum(dtype=float) + imputed[~agree].sum()
    n_agree = int(agree.sum())
    return PolicyValueEstimate(
        value=float(total / len(d)),
        n_agree=n_agree,
        n_disagree=len(d) - n_agree,
        release_rate=pi.release_rate,
    )


def group_mask(d: Dataset, G):
    """
    Turns a unit predicate into a row mask: a boolean array, a callable taking the
    dataset, or a collection of ids.
    """
    if callable(G):
        mask = np.asarray(G(d), dtype=bool)
    elif isinstance(G, np.ndarray) and G.dtype == bool:
        mask = G
    else:
        mask = d.mask_of(np.fromiter(G, dtype=np.int64))
    if mask.shape != (len(d),):
        raise AlignmentError(what="Subgroup mask", got=mask.shape[0], expected=len(d))
    return mask


def subgroup_ate(d: Dataset, G, value_fn: Callable[[Policy], object], name="G"):
    """
    Subgroup effect of treating G versus treating no one:
    (V(pi_G) - V(pi_empty)) / Pr(X in G). ``value_fn`` may return a number or a
    vector of posterior draws.
    """
    mask = group_mask(d, G)
    size = int(mask.sum())
    if size == 0:
        raise EmptyGroupError(name=name)
    treat_group = Policy.fixed(mask.astype(np.int8))
    treat_nobody = Policy.fixed(np.zeros(len(d), dtype=np.int8))
    difference = np.asarray(value_fn(treat_group), dtype=float) - np.asarray(value_fn(treat_nobody), dtype=float)
    effect = difference / (size / len(d))
    return float(effect) if effect.ndim == 0 else effect


def oracle_policy_value(truth, pi: Policy) -> float:
    """
    Exact policy value from stored potential outcomes.
    """
    pi.check_aligned(len(truth.y0), what="Policy")
    return float(np.mean(np.where(pi.decisions == 1, truth.y1, truth.y0)))


def policy_curve(d: Dataset, policies, nz: NuisanceEstimates, truth=None) -> pd.DataFrame:
    """
    Curve export table: one row per policy with its release rate, direct value
    and (when a truth aligned to ``d`` is given) the oracle value.
    """
    rows = []
    for pi in policies:
        estimate = direct_policy_value(d, pi, nz)
        row = {"threshold": pi.cutoff, "release_rate": estimate.release_rate, "direct_value": estimate.value}
        if truth is not None:
            row["oracle_value"] = oracle_policy_value(truth, pi)
        rows.append(row)
    columns = ["threshold", "release_rate", "direct_value"] + (["oracle_value"] if truth is not None else [])
    return pd.DataFrame(rows, columns=columns)
