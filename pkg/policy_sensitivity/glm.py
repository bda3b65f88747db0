"""
L1-regularised logistic regression by cyclic coordinate descent.

Features are standardised internally (population standard deviation), the
intercept is never penalised and coefficients are reported on the original
scale. Each coordinate takes a proximal Newton step and falls back to the
majorisation step (curvature bound 1/4) whenever the Newton step does not lower
the penalised objective, so the objective never increases across sweeps.
"""
import logging
from dataclasses import dataclass, field, replace
from typing import Dict, Optional

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy.special import expit, logit
from sklearn.metrics import log_loss
from sklearn.model_selection import KFold

from .conf import get_probability_eps, get_setting, get_threads
from .data import Dataset
from .exceptions import (AlignmentError, ConvergenceError, DegenerateTargetError, DomainError,
                         InsufficientDataError, SchemaError)

logger = logging.getLogger(__name__)

TARGETS = ("treatment", "outcome")
N_LAMBDAS = 50
LAMBDA_RATIO = 1e-4


@dataclass(frozen=True)
class CVResult:
    lambdas: np.ndarray
    mean_loss: np.ndarray
    se_loss: np.ndarray
    best_lambda: float
    chosen_lambda: float

    def to_frame(self):
        return pd.DataFrame({"lambda": self.lambdas, "mean_log_loss": self.mean_loss, "se_log_loss": self.se_loss})


@dataclass(frozen=True)
class GlmFit:
    """
    A fitted lasso logistic model. ``objective`` is the penalised negative
    log-likelihood per observation on the standardised scale.
    """
    schema: tuple
    target: str
    intercept: float
    coefficients: np.ndarray
    lambda_: float
    means: np.ndarray
    scales: np.ndarray
    converged: bool
    objective: float
    n_sweeps: int
    n: int
    cv: Optional[CVResult] = field(default=None, compare=False)

    @property
    def standardized_coefficients(self):
        return self.coefficients * self.scales

    @property
    def standardized_intercept(self):
        return float(self.intercept + self.coefficients @ self.means)

    def linear_predictor(self, covariates):
        return self.intercept + np.asarray(covariates, dtype=float) @ self.coefficients

    def to_dict(self):
        return {
            "target": self.target,
            "schema": list(self.schema),
            "intercept": self.intercept,
            "coefficients": dict(zip(self.schema, (float(c) for c in self.coefficients))),
            "means": [float(v) for v in self.means],
            "scales": [float(v) for v in self.scales],
            "lambda": self.lambda_,
            "converged": self.converged,
            "objective": self.objective,
            "n_sweeps": self.n_sweeps,
            "n": self.n,
        }

    @classmethod
    def from_dict(cls, payload):
        schema = tuple(payload["schema"])
        return cls(
            schema=schema,
            target=payload["target"],
            intercept=float(payload["intercept"]),
            coefficients=np.array([payload["coefficients"][name] for name in schema], dtype=float),
            lambda_=float(payload["lambda"]),
            means=np.array(payload.get("means", [0.0] * len(schema)), dtype=float),
            scales=np.array(payload.get("scales", [1.0] * len(schema)), dtype=float),
            converged=bool(payload["converged"]),
            objective=float(payload["objective"]),
            n_sweeps=int(payload["n_sweeps"]),
            n=int(payload["n"]),
        )


def mean_loss(eta, y):
    """
    Mean negative log-likelihood of a Bernoulli-logit model.
    """
    return float(np.mean(np.logaddexp(0.0, eta) - y * eta))


def penalized_objective(eta, y, beta, lam):
    return mean_loss(eta, y) + lam * float(np.sum(np.abs(beta)))


def log_likelihood_and_gradient(intercept, coefficients, X, y):
    """
    Unpenalised log-likelihood and its gradient with respect to
    (intercept, coefficients...).
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    eta = intercept + X @ np.asarray(coefficients, dtype=float)
    value = float(np.sum(y * eta - np.logaddexp(0.0, eta)))
    residual = y - expit(eta)
    return value, np.concatenate([[residual.sum()], X.T @ residual])


def _soft_threshold(z, gamma):
    return float(np.sign(z) * max(abs(z) - gamma, 0.0))


def standardize(X):
    """
    Returns (Z, means, scales, active); constant columns keep scale 1 and are
    marked inactive.
    """
    means = X.mean(axis=0)
    scales = X.std(axis=0)
    active = scales > 0
    scales = np.where(active, scales, 1.0)
    return (X - means) / scales, means, scales, active


def _coordinate_descent(Z, y, lam, active, intercept, beta, tol, max_sweeps):
    """
    Runs coordinate descent on standardised features from a warm start.
    Returns (intercept, beta, converged, objective, sweeps).
    """
    n, m = Z.shape
    beta = np.array(beta, dtype=float)
    sq = (Z ** 2).mean(axis=0)
    eta = intercept + Z @ beta
    loss = mean_loss(eta, y)
    objective = loss + lam * float(np.abs(beta).sum())
    for sweep in range(1, max_sweeps + 1):
        previous = objective
        max_delta = 0.0
        for j in range(-1, m):
            if j >= 0 and not active[j]:
                continue
            z = Z[:, j] if j >= 0 else np.ones(n)
            penalty = lam if j >= 0 else 0.0
            w = beta[j] if j >= 0 else intercept
            p = expit(eta)
            g = float((p - y) @ z) / n
            if j >= 0 and w == 0.0 and abs(g) <= penalty:
                continue
            current = loss + penalty * abs(w)
            step = None
            curvature = float((p * (1.0 - p)) @ (z * z)) / n
            if curvature > 1e-12:
                w_new = _soft_threshold(w - g / curvature, penalty / curvature)
                if w_new != w:
                    eta_new = eta + (w_new - w) * z
                    loss_new = mean_loss(eta_new, y)
                    if loss_new + penalty * abs(w_new) <= current:
                        step = (w_new, eta_new, loss_new)
            if step is None:
                bound = 0.25 * (sq[j] if j >= 0 else 1.0)
                w_new = _soft_threshold(w - g / bound, penalty / bound)
                if w_new == w:
                    continue
                eta_new = eta + (w_new - w) * z
                step = (w_new, eta_new, mean_loss(eta_new, y))
            w_new, eta, loss = step
            max_delta = max(max_delta, abs(w_new - w))
            if j >= 0:
                beta[j] = w_new
            else:
                intercept = w_new
        objective = penalized_objective(eta, y, beta, lam)
        if objective > previous + 1e-12 * max(1.0, abs(previous)):
            raise ConvergenceError(f"Penalised objective increased in sweep {sweep}: {previous!r} -> {objective!r}.")
        logger.debug("sweep %d objective %.12g max update %.3g", sweep, objective, max_delta)
        if max_delta < tol:
            return intercept, beta, True, objective, sweep
    return intercept, beta, False, objective, max_sweeps


def _target_vector(d: Dataset, target):
    if target not in TARGETS:
        raise DomainError(f"Target must be one of {', '.join(TARGETS)}, got {target!r}.")
    return getattr(d, target).astype(float)


def subset_mask(d: Dataset, subset):
    """
    Turns an id predicate into a row mask. ``subset`` may be None (all units), a
    boolean mask, a callable on ids or a collection of ids.
    """
    if subset is None:
        return np.ones(len(d), dtype=bool)
    if callable(subset):
        return np.fromiter((bool(subset(int(i))) for i in d.ids), dtype=bool, count=len(d))
    if isinstance(subset, np.ndarray) and subset.dtype == bool:
        if subset.shape != (len(d),):
            raise AlignmentError(what="subset mask", got=subset.shape[0], expected=len(d))
        return subset
    return d.mask_of(np.fromiter(subset, dtype=np.int64))


def _check_classes(y, description):
    if y.size == 0:
        raise InsufficientDataError(f"No units available for {description}.")
    if np.all(y == y[0]):
        raise DegenerateTargetError(target=description, value=int(y[0]), n=int(y.size))


def _fit_arrays(X, y, lam, warm=None, tol=None, max_sweeps=None):
    if tol is None:
        tol = float(get_setting("POLICY_SENSITIVITY_CD_TOL", 1e-8))
    if max_sweeps is None:
        max_sweeps = int(get_setting("POLICY_SENSITIVITY_CD_MAX_SWEEPS", 10000))
    Z, means, scales, active = standardize(X)
    if warm is None:
        rate = float(np.clip(y.mean(), 1e-12, 1 - 1e-12))
        intercept, beta = float(logit(rate)), np.zeros(X.shape[1])
    else:
        intercept, beta = warm
    intercept, beta, converged, objective, sweeps = _coordinate_descent(
        Z, y, lam, active, intercept, beta, tol, max_sweeps)
    return intercept, beta, means, scales, converged, objective, sweeps


def _to_fit(schema, target, lam, n, result, cv=None):
    intercept, beta, means, scales, converged, objective, sweeps = result
    coefficients = beta / scales
    return GlmFit(
        schema=tuple(schema),
        target=target,
        intercept=float(intercept - coefficients @ means),
        coefficients=coefficients,
        lambda_=float(lam),
        means=means,
        scales=scales,
        converged=bool(converged),
        objective=float(objective),
        n_sweeps=int(sweeps),
        n=int(n),
        cv=cv,
    )


def fit_lasso_logit(d: Dataset, target, subset=None, lam=0.0) -> GlmFit:
    """
    Fits an L1-penalised logistic regression of ``target`` on all covariates of
    ``d`` restricted to ``subset``.
    """
    if lam < 0:
        raise DomainError(f"Penalty must be nonnegative, got {lam!r}.")
    y_all = _target_vector(d, target)
    mask = subset_mask(d, subset)
    y = y_all[mask]
    _check_classes(y, target)
    result = _fit_arrays(d.covariates[mask], y, float(lam))
    fit = _to_fit(d.schema, target, lam, y.size, result)
    if not fit.converged:
        logger.warning("Lasso fit for %s (lambda=%g) stopped after %d sweeps without converging",
                       target, lam, fit.n_sweeps)
    return fit


def kkt_residual(fit: GlmFit, d: Dataset, subset=None):
    """
    Largest violation of the lasso optimality conditions on the standardised
    scale (intercept gradient included).
    """
    mask = subset_mask(d, subset)
    y = _target_vector(d, fit.target)[mask]
    Z = (d.covariates[mask] - fit.means) / fit.scales
    beta = fit.standardized_coefficients
    p = expit(fit.standardized_intercept + Z @ beta)
    g = Z.T @ (p - y) / y.size
    lam = fit.lambda_
    active = beta != 0
    violations = np.where(active, np.abs(g + lam * np.sign(beta)), np.maximum(np.abs(g) - lam, 0.0))
    worst = float(violations.max()) if violations.size else 0.0
    return max(worst, abs(float(np.mean(p - y))))


def lambda_max(d: Dataset, target, subset=None):
    """
    Smallest penalty at which every slope is zero.
    """
    mask = subset_mask(d, subset)
    y = _target_vector(d, target)[mask]
    Z, _, _, active = standardize(d.covariates[mask])
    if Z.shape[1] == 0 or not active.any():
        return 0.0
    return float(np.max(np.abs(Z[:, active].T @ (y - y.mean())) / y.size))


def lambda_path(d: Dataset, target, subset=None, size=N_LAMBDAS, ratio=LAMBDA_RATIO):
    top = lambda_max(d, target, subset)
    if top <= 0:
        return np.array([0.0])
    return np.geomspace(top, top * ratio, size)


def _fold_losses(X, y, train, test, lambdas):
    eps = get_probability_eps()
    losses = np.empty(len(lambdas))
    warm = None
    for i, lam in enumerate(lambdas):
        result = _fit_arrays(X[train], y[train], lam, warm=warm)
        intercept, beta, means, scales = result[:4]
        warm = (intercept, beta)
        coefficients = beta / scales
        p = expit(intercept - coefficients @ means + X[test] @ coefficients)
        losses[i] = log_loss(y[test], np.clip(p, eps, 1 - eps), labels=[0, 1])
    return losses


def cross_validate(d: Dataset, target, subset=None, lambda_grid=None, cv_folds=5, seed=0, n_jobs=None) -> CVResult:
    """
    K-fold cross-validated log-loss over a descending penalty grid; the chosen
    penalty follows the one-standard-error rule.
    """
    if cv_folds < 2:
        raise DomainError(f"cv_folds must be at least 2, got {cv_folds}.")
    mask = subset_mask(d, subset)
    X = d.covariates[mask]
    y = _target_vector(d, target)[mask]
    _check_classes(y, target)
    if y.size < cv_folds:
        raise InsufficientDataError(f"{y.size} units cannot fill {cv_folds} folds.")
    lambdas = lambda_path(d, target, mask) if lambda_grid is None else np.asarray(lambda_grid, dtype=float)
    if np.any(lambdas < 0):
        raise DomainError("Penalty grid must be nonnegative.")
    lambdas = np.sort(lambdas)[::-1]

    splits = list(KFold(n_splits=cv_folds, shuffle=True, random_state=seed).split(X))
    for train, _ in splits:
        _check_classes(y[train], f"{target} (cross-validation training fold)")

    losses = Parallel(n_jobs=get_threads(n_jobs), prefer="threads")(
        delayed(_fold_losses)(X, y, train, test, lambdas) for train, test in splits)
    losses = np.vstack(losses)
    mean = losses.mean(axis=0)
    se = losses.std(axis=0, ddof=1) / np.sqrt(cv_folds)
    best = int(np.argmin(mean))
    eligible = np.flatnonzero(mean <= mean[best] + se[best])
    chosen = float(lambdas[eligible].max())
    return CVResult(lambdas=lambdas, mean_loss=mean, se_loss=se,
                    best_lambda=float(lambdas[best]), chosen_lambda=chosen)


def fit_cv_lasso(d: Dataset, target, subset=None, lambda_grid=None, cv_folds=5, seed=0, n_jobs=None) -> GlmFit:
    """
    Chooses the penalty by cross-validation and refits on the whole subset.
    """
    if lambda_grid is not None and len(lambda_grid) == 1:
        return fit_lasso_logit(d, target, subset, float(lambda_grid[0]))
    cv = cross_validate(d, target, subset, lambda_grid, cv_folds, seed, n_jobs)
    fit = fit_lasso_logit(d, target, subset, cv.chosen_lambda)
    logger.info("Chose lambda=%.4g for %s (best %.4g, n=%d)", cv.chosen_lambda, target, cv.best_lambda, fit.n)
    return replace(fit, cv=cv)


def predict(fit: GlmFit, d: Dataset):
    """
    Probabilities from the fitted model, clamped to [eps, 1 - eps].
    """
    if tuple(d.schema) != tuple(fit.schema):
        raise SchemaError(f"Model expects covariates {list(fit.schema)}, dataset has {list(d.schema)}.")
    eps = get_probability_eps()
    return np.clip(expit(fit.linear_predictor(d.covariates)), eps, 1 - eps)


@dataclass(frozen=True)
class NuisanceEstimates:
    """
    Per-unit outcome and propensity estimates aligned to a dataset's row order.
    """
    ids: np.ndarray
    mu0_hat: np.ndarray
    mu1_hat: np.ndarray
    e_hat: np.ndarray
    source_fits: Dict[str, GlmFit] = field(default_factory=dict, compare=False)

    @classmethod
    def from_fits(cls, fits: Dict[str, GlmFit], d: Dataset):
        return cls(
            ids=d.ids.copy(),
            mu0_hat=predict(fits["mu0"], d),
            mu1_hat=predict(fits["mu1"], d),
            e_hat=predict(fits["e"], d),
            source_fits=dict(fits),
        )

    def __len__(self):
        return int(self.ids.shape[0])

    def check_aligned(self, d: Dataset):
        if len(self) != len(d):
            raise AlignmentError(what="Nuisance estimates", got=len(self), expected=len(d))
        if not np.array_equal(self.ids, d.ids):
            raise AlignmentError("Nuisance estimates are not aligned with the dataset's record order.")

    def take(self, rows):
        rows = np.asarray(rows)
        return NuisanceEstimates(self.ids[rows], self.mu0_hat[rows], self.mu1_hat[rows], self.e_hat[rows],
                                 self.source_fits)

    def to_frame(self):
        return pd.DataFrame({"id": self.ids, "mu0_hat": self.mu0_hat, "mu1_hat": self.mu1_hat, "e_hat": self.e_hat})

    @classmethod
    def from_frame(cls, frame, fits=None):
        return cls(frame["id"].to_numpy(np.int64), frame["mu0_hat"].to_numpy(float),
                   frame["mu1_hat"].to_numpy(float), frame["e_hat"].to_numpy(float), dict(fits or {}))


def fit_nuisance(d: Dataset, fold, target: Optional[Dataset] = None, lambda_grid=None, cv_folds=5, seed=0,
                 n_jobs=None) -> NuisanceEstimates:
    """
    Fits mu0 on untreated fold units, mu1 on treated fold units (outcome target)
    and the propensity on all fold units (treatment target), then predicts on
    ``target`` (``d`` when omitted).
    """
    in_fold = subset_mask(d, fold)
    untreated = in_fold & (d.treatment == 0)
    treated = in_fold & (d.treatment == 1)
    _check_classes(d.outcome[untreated].astype(float), "outcome among untreated units")
    _check_classes(d.outcome[treated].astype(float), "outcome among treated units")
    fits = {
        "mu0": fit_cv_lasso(d, "outcome", untreated, lambda_grid, cv_folds, seed, n_jobs),
        "mu1": fit_cv_lasso(d, "outcome", treated, lambda_grid, cv_folds, seed + 1, n_jobs),
        "e": fit_cv_lasso(d, "treatment", in_fold, lambda_grid, cv_folds, seed + 2, n_jobs),
    }
    estimates = NuisanceEstimates.from_fits(fits, d if target is None else target)
    logger.info("Nuisance fits done: mean mu0=%.4f mu1=%.4f e=%.4f over %d units",
                estimates.mu0_hat.mean(), estimates.mu1_hat.mean(), estimates.e_hat.mean(), len(estimates))
    return estimates


def fit_risk_model(d: Dataset, fold, lambda_grid=None, cv_folds=5, seed=0, n_jobs=None) -> GlmFit:
    """
    Flight risk if released, fit on the untreated units of ``fold``; its
    predictions rank units for the threshold policies.
    """
    released = subset_mask(d, fold) & (d.treatment == 0)
    return fit_cv_lasso(d, "outcome", released, lambda_grid, cv_folds, seed, n_jobs)
