"""
Synthetic ground truth: covariates, both potential outcomes and a treatment for
every unit, drawn from known probabilities so policy values can be computed
exactly. Censoring covariates away induces unmeasured confounding of known form.
"""
import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, Optional, Sequence

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy.special import expit

from .conf import get_threads
from .confound import SensitivitySpec, fit_sensitivity, posterior_subgroup_ate, sensitivity_curve, summarize_draws
from .data import Dataset, split_folds
from .exceptions import AlignmentError, ArtifactIOError, CalibrationError, ConfigError, DomainError, ValidationError
from .glm import fit_nuisance, fit_risk_model, predict
from .policy import make_policy_family, oracle_policy_value, policy_curve, subgroup_ate
from .rr_baseline import RRGrid, rr_sweep

logger = logging.getLogger(__name__)

BASE_SCHEMA = ("age", "gender", "prior_fta")
CENSORINGS = (("age",), ("age", "gender"), ("age", "gender", "prior_fta"))
DEFAULT_THRESHOLDS = tuple(round(0.03 * i, 2) for i in range(15))
MODELS = ("mu0", "mu1", "e")
INTERCEPT_BOUND = 30.0
CALIBRATION_STEPS = 100
CALIBRATION_TOLERANCE = 0.01


def _default_coefficients():
    return {
        "mu0": {"age_z": -0.45, "gender": 0.5, "prior_fta": 0.45},
        "mu1": {"age_z": -0.35, "gender": 0.4, "prior_fta": 0.35},
        "e": {"age_z": -0.3, "gender": 0.6, "prior_fta": 0.5},
    }


def _default_targets():
    return {"treatment_rate": 0.31, "fta_released": 0.15, "fta_detained": 0.09}


@dataclass
class ScenarioSpec:
    """
    A preset generator: covariate marginals, logistic slopes for (mu0, mu1, e)
    on age_z = (age - 35) / 10, gender (1 = male) and prior_fta, and the status
    quo marginals the intercepts are calibrated to.
    """
    n: int = 20000
    noise_features: int = 0
    coefficients: Dict[str, Dict[str, float]] = field(default_factory=_default_coefficients)
    targets: Dict[str, float] = field(default_factory=_default_targets)

    def validate(self):
        if self.n < 1:
            raise ConfigError(f"Scenario needs at least one unit, got n={self.n}.")
        if self.noise_features < 0:
            raise ConfigError("noise_features must be nonnegative.")
        if set(self.coefficients) != set(MODELS):
            raise ConfigError(f"Scenario coefficients must cover exactly {', '.join(MODELS)}.")
        for model, slopes in self.coefficients.items():
            unknown = set(slopes) - {"age_z", "gender", "prior_fta"}
            if unknown:
                raise ConfigError(f"Unknown {model} coefficients: {', '.join(sorted(unknown))}.")
        for name in ("treatment_rate", "fta_released", "fta_detained"):
            value = self.targets.get(name)
            if value is None or not 0.0 < value < 1.0:
                raise ConfigError(f"Target {name} must lie in (0, 1), got {value!r}.")

    @property
    def schema(self):
        return BASE_SCHEMA + tuple(f"noise_{j}" for j in range(1, self.noise_features + 1))

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, payload):
        unknown = set(payload) - {"n", "noise_features", "coefficients", "targets"}
        if unknown:
            raise ConfigError(f"Unknown scenario keys: {', '.join(sorted(unknown))}.")
        defaults = cls()
        spec = cls(
            n=int(payload.get("n", defaults.n)),
            noise_features=int(payload.get("noise_features", defaults.noise_features)),
            coefficients={**defaults.coefficients, **payload.get("coefficients", {})},
            targets={**defaults.targets, **payload.get("targets", {})},
        )
        spec.validate()
        return spec

    @classmethod
    def load(cls, path):
        try:
            with open(path, encoding="utf-8") as fh:
                return cls.from_dict(json.load(fh))
        except OSError as exc:
            raise ArtifactIOError(action="read", path=path, reason=exc.strerror or str(exc)) from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path} is not valid JSON: {exc}") from exc

    def save(self, path):
        try:
            with open(path, "w", encoding="utf-8", newline="\n") as fh:
                json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
                fh.write("\n")
        except OSError as exc:
            raise ArtifactIOError(action="write", path=path, reason=exc.strerror or str(exc)) from exc


@dataclass
class SyntheticTruth:
    """
    Uncensored units with both potential outcomes. ``base`` is the observational
    view: its outcome is y1 where t = 1 and y0 elsewhere.
    """
    base: Dataset
    y0: np.ndarray
    y1: np.ndarray
    t: np.ndarray
    generator_probs: np.ndarray
    seed: Optional[int] = None

    def __post_init__(self):
        n = len(self.base)
        for name in ("y0", "y1", "t"):
            if len(getattr(self, name)) != n:
                raise AlignmentError(what=name, got=len(getattr(self, name)), expected=n)
        observed = np.where(self.t == 1, self.y1, self.y0)
        if not np.array_equal(observed, self.base.outcome) or not np.array_equal(self.t, self.base.treatment):
            raise ValidationError("Observed view disagrees with the stored potential outcomes.")

    def __len__(self):
        return len(self.base)

    @property
    def ids(self):
        return self.base.ids

    def take(self, rows):
        rows = np.asarray(rows)
        if rows.dtype == bool:
            rows = np.flatnonzero(rows)
        return SyntheticTruth(self.base.take(rows), self.y0[rows], self.y1[rows], self.t[rows],
                              self.generator_probs[rows], self.seed)

    def subset(self, ids):
        return self.take(self.base.mask_of(ids))

    def ate(self, mask=None):
        mask = np.ones(len(self), dtype=bool) if mask is None else mask
        return float(np.mean(self.y1[mask].astype(float) - self.y0[mask]))

    def to_frame(self):
        frame = pd.DataFrame({"id": self.base.ids})
        for j, name in enumerate(self.base.schema):
            frame[name] = self.base.covariates[:, j]
        frame["t"] = self.t.astype(int)
        frame["y0"] = self.y0.astype(int)
        frame["y1"] = self.y1.astype(int)
        for j, model in enumerate(MODELS):
            frame[f"p_{model}"] = self.generator_probs[:, j]
        return frame

    @classmethod
    def from_frame(cls, frame: pd.DataFrame, seed=None):
        reserved = {"id", "t", "y0", "y1", *(f"p_{m}" for m in MODELS)}
        missing = reserved - set(frame.columns)
        if missing:
            raise ValidationError(f"Truth table lacks columns {', '.join(sorted(missing))}.")
        schema = tuple(c for c in frame.columns if c not in reserved)
        t = frame["t"].to_numpy(np.int8)
        y0 = frame["y0"].to_numpy(np.int8)
        y1 = frame["y1"].to_numpy(np.int8)
        base = Dataset(schema, frame["id"].to_numpy(np.int64), frame[list(schema)].to_numpy(float), t,
                       np.where(t == 1, y1, y0), provenance=f"synthetic, seed={seed}")
        probs = frame[[f"p_{m}" for m in MODELS]].to_numpy(float)
        return cls(base, y0, y1, t, probs, seed)


def _streams(seed):
    # covariates, y0, y1, t
    return np.random.SeedSequence(seed).spawn(4)


def _uniforms(streams, n):
    return [np.random.default_rng(s).random(n) for s in streams]


def draw_potential_outcomes(probs, seed):
    """
    Independent Bernoulli draws of (y0, y1, t) from per-unit probabilities
    (columns mu0, mu1, e), each from its own random stream.
    """
    probs = np.asarray(probs, dtype=float)
    if probs.ndim != 2 or probs.shape[1] != 3:
        raise DomainError("Generator probabilities must have shape (n, 3).")
    if np.any((probs < 0) | (probs > 1)):
        raise DomainError("Generator probabilities must lie in [0, 1].")
    u0, u1, ut = _uniforms(_streams(seed)[1:], probs.shape[0])
    return (
        (u0 < probs[:, 0]).astype(np.int8),
        (u1 < probs[:, 1]).astype(np.int8),
        (ut < probs[:, 2]).astype(np.int8),
    )


def _draw_covariates(spec: ScenarioSpec, rng):
    n = spec.n
    young = rng.random(n) < 0.6
    age = np.where(young, rng.normal(28.0, 6.0, n), rng.normal(45.0, 10.0, n))
    age = np.round(np.clip(age, 18.0, 80.0))
    gender = (rng.random(n) < 0.8).astype(float)
    prior_fta = rng.negative_binomial(1, 0.55, n).astype(float)
    columns = [age, gender, prior_fta] + [rng.standard_normal(n) for _ in range(spec.noise_features)]
    return np.column_stack(columns)


def _slopes_term(spec, model, covariates):
    slopes = spec.coefficients[model]
    age_z = (covariates[:, 0] - 35.0) / 10.0
    return (slopes.get("age_z", 0.0) * age_z + slopes.get("gender", 0.0) * covariates[:, 1]
            + slopes.get("prior_fta", 0.0) * covariates[:, 2])


def _calibrate_realized(name, linear, uniforms, mask, target):
    """
    Bisects the intercept until the realised rate of (uniform < p) over ``mask``
    matches ``target``.
    """
    def rate(a):
        return float(np.mean(uniforms[mask] < expit(a + linear[mask])))

    lo, hi = -INTERCEPT_BOUND, INTERCEPT_BOUND
    lower, upper = rate(lo), rate(hi)
    if not lower <= target <= upper:
        raise CalibrationError(name=name, target=target, lower=lower, upper=upper)
    for _ in range(CALIBRATION_STEPS):
        mid = 0.5 * (lo + hi)
        if rate(mid) < target:
            lo = mid
        else:
            hi = mid
    intercept = 0.5 * (lo + hi)
    reached = rate(intercept)
    if abs(reached - target) > CALIBRATION_TOLERANCE:
        raise CalibrationError(name=name, target=target, lower=lower, upper=upper)
    logger.debug("Calibrated %s intercept to %.4f (rate %.4f, target %.4f)", name, intercept, reached, target)
    return intercept


def generate_truth(spec: ScenarioSpec = None, seed=0) -> SyntheticTruth:
    """
    Draws covariates from the preset marginals, calibrates the three intercepts
    on the realised status quo (treatment rate, failure rate among released and
    among detained units) and draws both potential outcomes and the treatment.
    """
    spec = ScenarioSpec() if spec is None else spec
    spec.validate()
    streams = _streams(seed)
    covariates = _draw_covariates(spec, np.random.default_rng(streams[0]))
    u0, u1, ut = _uniforms(streams[1:], spec.n)
    everyone = np.ones(spec.n, dtype=bool)

    linear = {model: _slopes_term(spec, model, covariates) for model in MODELS}
    a_e = _calibrate_realized("e", linear["e"], ut, everyone, spec.targets["treatment_rate"])
    treated = ut < expit(a_e + linear["e"])
    if treated.all() or not treated.any():
        raise CalibrationError(name="e", target=spec.targets["treatment_rate"], lower=0.0, upper=1.0)
    a_0 = _calibrate_realized("mu0", linear["mu0"], u0, ~treated, spec.targets["fta_released"])
    a_1 = _calibrate_realized("mu1", linear["mu1"], u1, treated, spec.targets["fta_detained"])

    probs = np.column_stack([expit(a_0 + linear["mu0"]), expit(a_1 + linear["mu1"]), expit(a_e + linear["e"])])
    y0, y1, t = draw_potential_outcomes(probs, seed)
    ids = np.arange(1, spec.n + 1)
    base = Dataset(spec.schema, ids, covariates, t, np.where(t == 1, y1, y0), provenance=f"synthetic, seed={seed}")
    truth = SyntheticTruth(base, y0, y1, t, probs, seed)
    logger.info("Generated %d units: treatment rate %.3f, FTA released %.3f, FTA detained %.3f",
                spec.n, t.mean(), y0[t == 0].mean(), y1[t == 1].mean())
    return truth


def truth_from_dataset(d: Dataset, seed=0, lambda_grid=None, cv_folds=5, n_jobs=None) -> SyntheticTruth:
    """
    Builds ground truth from an observed dataset: lasso fits of mu0, mu1 and e on
    all units supply the generator probabilities.
    """
    nz = fit_nuisance(d, None, lambda_grid=lambda_grid, cv_folds=cv_folds, seed=seed, n_jobs=n_jobs)
    probs = np.column_stack([nz.mu0_hat, nz.mu1_hat, nz.e_hat])
    y0, y1, t = draw_potential_outcomes(probs, seed)
    base = Dataset(d.schema, d.ids, d.covariates, t, np.where(t == 1, y1, y0),
                   provenance=f"synthetic from {d.provenance or 'dataset'}, seed={seed}")
    return SyntheticTruth(base, y0, y1, t, probs, seed)


def censor(truth: SyntheticTruth, keep: Sequence[str]) -> Dataset:
    """
    The observational view restricted to the ``keep`` covariates.
    """
    if not keep:
        raise ValidationError("Censoring must keep at least one covariate.")
    return truth.base.restrict(keep, provenance=f"{truth.base.provenance}, censoring={'+'.join(keep)}")


def default_subgroups():
    """
    Named unit predicates over the full covariates: age bands, gender,
    prior-FTA bands and the whole population.
    """
    def age_band(lo, hi=None):
        return lambda d: (d.column("age") >= lo) & (d.column("age") < (np.inf if hi is None else hi))

    def prior_band(lo, hi=None):
        return lambda d: (d.column("prior_fta") >= lo) & (d.column("prior_fta") <= (np.inf if hi is None else hi))

    return {
        "age 18-24": age_band(18, 25),
        "age 25-34": age_band(25, 35),
        "age 35-44": age_band(35, 45),
        "age 45+": age_band(45),
        "male": lambda d: d.column("gender") == 1,
        "female": lambda d: d.column("gender") == 0,
        "prior_fta 0": prior_band(0, 0),
        "prior_fta 1-2": prior_band(1, 2),
        "prior_fta 3+": prior_band(3),
        "all": lambda d: np.ones(len(d), dtype=bool),
    }


@dataclass
class ValidationReport:
    coverage: pd.DataFrame
    subgroups: pd.DataFrame
    summary: pd.DataFrame


def _validate_censoring(truth, keep, spec, thresholds, seed, fractions, eval_size, lambda_grid, cv_folds,
                        subgroups, rr_grid):
    name = "+".join(keep)
    d = censor(truth, keep)
    folds = split_folds(d, seed, fractions, eval_size)
    risk = fit_risk_model(d, folds.policy_fold, lambda_grid, cv_folds, seed)
    d_eval = d.subset(folds.eval_fold)
    truth_eval = truth.subset(folds.eval_fold)
    nz = fit_nuisance(d, folds.nuisance_fold, target=d_eval, lambda_grid=lambda_grid, cv_folds=cv_folds,
                      seed=seed + 10)
    policies = make_policy_family(predict(risk, d_eval), thresholds)

    curve = policy_curve(d_eval, policies, nz, truth_eval)
    draws = fit_sensitivity(d_eval, nz, spec)
    bands = sensitivity_curve(draws, d_eval, nz, None, policies)
    envelope = rr_sweep(d_eval, nz, policies, rr_grid)
    coverage = curve.assign(**{c: bands[c] for c in ("q025", "q25", "q50", "q75", "q975")})
    coverage["rr_min"] = envelope["rr_min"].to_numpy()
    coverage["rr_max"] = envelope["rr_max"].to_numpy()
    coverage["covered"] = (coverage["q025"] <= coverage["oracle_value"]) & (coverage["oracle_value"] <= coverage["q975"])
    coverage["width95"] = coverage["q975"] - coverage["q025"]
    coverage["rr_covered"] = (coverage["rr_min"] <= coverage["oracle_value"]) & (coverage["oracle_value"] <= coverage["rr_max"])
    coverage.insert(0, "censoring", name)

    rows = []
    for group, predicate in subgroups.items():
        mask = np.asarray(predicate(truth_eval.base), dtype=bool)
        if not mask.any():
            logger.warning("Subgroup %s is empty in the evaluation fold of %s; skipped", group, name)
            continue
        posterior = summarize_draws(posterior_subgroup_ate(draws, d_eval, nz, None, mask, name=group))
        oracle = subgroup_ate(d_eval, mask, lambda pi: oracle_policy_value(truth_eval, pi), name=group)
        rows.append({"censoring": name, "subgroup": group, "size": int(mask.sum()), "oracle_ate": oracle,
                     "q025": posterior["q025"], "q50": posterior["q50"], "q975": posterior["q975"],
                     "covered": posterior["q025"] <= oracle <= posterior["q975"]})
    subgroup_table = pd.DataFrame(rows)

    summary = {
        "censoring": name,
        "coverage_fraction": float(coverage["covered"].mean()),
        "rr_coverage_fraction": float(coverage["rr_covered"].mean()),
        "mean_width95": float(coverage["width95"].mean()),
        "subgroup_coverage": float(subgroup_table["covered"].mean()) if len(subgroup_table) else float("nan"),
        "max_rhat": draws.max_rhat,
        "divergences": draws.divergences,
        "status": draws.status,
    }
    logger.info("Censoring %s: coverage %.2f, mean 95%% width %.4f, status %s",
                name, summary["coverage_fraction"], summary["mean_width95"], summary["status"])
    return coverage, subgroup_table, summary


def run_validation_suite(truth: SyntheticTruth, censorings=CENSORINGS, spec: SensitivitySpec = SensitivitySpec(),
                         thresholds=DEFAULT_THRESHOLDS, seed=0, fractions=(0.45, 0.45, 0.10), eval_size=None,
                         lambda_grid=None, cv_folds=5, subgroups=None, rr_caps=None,
                         rr_regime="double", n_jobs=None) -> ValidationReport:
    """
    Runs the full pipeline once per censoring and scores bands against the
    oracle policy values and subgroup effects.
    """
    subgroups = default_subgroups() if subgroups is None else subgroups
    rr_grid = RRGrid.regimes(rr_caps)[rr_regime]
    results = Parallel(n_jobs=min(len(censorings), get_threads(n_jobs)), prefer="threads")(
        delayed(_validate_censoring)(truth, tuple(keep), spec, thresholds, seed, fractions, eval_size,
                                     lambda_grid, cv_folds, subgroups, rr_grid)
        for keep in censorings)
    return ValidationReport(
        coverage=pd.concat([r[0] for r in results], ignore_index=True),
        subgroups=pd.concat([r[1] for r in results], ignore_index=True),
        summary=pd.DataFrame([r[2] for r in results]),
    )
