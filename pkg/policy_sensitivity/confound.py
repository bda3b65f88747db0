"""
Bayesian model of unmeasured confounding on top of fitted nuisance estimates.

Units are binned by estimated untreated risk; within each bin the treatment and
both outcome arms follow logistic models in the nuisance estimates plus a latent
per-unit confounder ``u``. Bin coefficients are tied together by random-walk
priors. The posterior yields a distribution over every policy value.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import pandas as pd
from scipy import special

from .conf import get_setting
from .data import Dataset
from .exceptions import AlignmentError, DomainError
from .glm import NuisanceEstimates
from .mcmc import LogDensityModel, PosteriorDraws, SamplerConfig, sample
from .policy import Policy, subgroup_ate
from .trunc_rank import mills_ratio

logger = logging.getLogger(__name__)

CHAINS = (
    "alpha_0", "alpha_mu0", "alpha_u",
    "beta_0", "beta_mu1", "beta_u",
    "gamma_0", "gamma_ehat", "gamma_u",
)
LOADINGS = ("alpha_u", "beta_u", "gamma_u")
QUANTILES = {"q025": 0.025, "q25": 0.25, "q50": 0.5, "q75": 0.75, "q975": 0.975}

LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)
LOG_2 = math.log(2.0)


@dataclass(frozen=True)
class BinAssignment:
    """
    Per-unit bin labels ``k`` in 1..K, aligned to the dataset's row order.
    """
    K: int
    k: np.ndarray

    @property
    def index(self):
        return self.k - 1

    @property
    def sizes(self):
        return np.bincount(self.index, minlength=self.K)

    def __len__(self):
        return int(self.k.shape[0])

    def check_aligned(self, n):
        if len(self) != n:
            raise AlignmentError(what="Bin assignment", got=len(self), expected=n)


def bin_by_risk(mu0_hat, K, ids=None) -> BinAssignment:
    """
    Ranks units by ``mu0_hat`` (ties by id) and cuts the ranking into K contiguous
    blocks; the first n mod K blocks hold one extra unit.
    """
    scores = np.asarray(mu0_hat, dtype=float)
    n = scores.size
    if K < 1:
        raise DomainError(f"K must be at least 1, got {K}.")
    if K > n:
        raise DomainError(f"Cannot form {K} bins from {n} units.")
    ids = np.arange(n) if ids is None else np.asarray(ids)
    order = np.lexsort((ids, scores))
    base, extra = divmod(n, K)
    sizes = np.full(K, base)
    sizes[:extra] += 1
    k = np.empty(n, dtype=np.int64)
    k[order] = np.repeat(np.arange(1, K + 1), sizes)
    k.setflags(write=False)
    return BinAssignment(K=int(K), k=k)


@dataclass
class ConfoundParams:
    """
    Constrained model parameters. ``tau`` is ordered like the model's chains.
    """
    alpha_0: np.ndarray
    alpha_mu0: np.ndarray
    alpha_u: np.ndarray
    beta_0: np.ndarray
    beta_mu1: np.ndarray
    beta_u: np.ndarray
    gamma_0: np.ndarray
    gamma_ehat: np.ndarray
    gamma_u: np.ndarray
    tau: np.ndarray
    u: np.ndarray

    def chain(self, name):
        return getattr(self, name)


@dataclass(frozen=True)
class SensitivitySpec:
    K: int = 10
    sigma_tau: float = 1.0
    sampler: SamplerConfig = field(default_factory=SamplerConfig)

    def validate(self):
        if self.K < 1:
            raise DomainError(f"K must be at least 1, got {self.K}.")
        if not self.sigma_tau > 0:
            raise DomainError(f"sigma_tau must be positive, got {self.sigma_tau!r}.")
        self.sampler.validate()


def random_walk_log_prior(values, tau):
    """
    log N(v_1 | 0, 1) + sum_j log N(v_j | v_{j-1}, tau^2).

    Returns (value, gradient in values, derivative in tau).
    """
    values = np.asarray(values, dtype=float)
    grad = np.zeros_like(values)
    value = -0.5 * values[0] ** 2 - LOG_SQRT_2PI
    grad[0] = -values[0]
    diff = np.diff(values)
    value += float(np.sum(-0.5 * (diff / tau) ** 2 - math.log(tau) - LOG_SQRT_2PI))
    grad[1:] -= diff / tau ** 2
    grad[:-1] += diff / tau ** 2
    grad_tau = float(np.sum(-1.0 / tau + diff ** 2 / tau ** 3))
    return float(value), grad, grad_tau


def positive_random_walk_log_prior(values, tau):
    """
    Half-normal first element, then normal steps centred on the previous value
    and truncated at zero (normalising constant included).
    """
    values = np.asarray(values, dtype=float)
    grad = np.zeros_like(values)
    value = LOG_2 - 0.5 * values[0] ** 2 - LOG_SQRT_2PI
    grad[0] = -values[0]
    diff = np.diff(values)
    previous = values[:-1]
    scaled = previous / tau
    ratio = mills_ratio(scaled)
    value += float(np.sum(-0.5 * (diff / tau) ** 2 - math.log(tau) - LOG_SQRT_2PI - special.log_ndtr(scaled)))
    grad[1:] -= diff / tau ** 2
    grad[:-1] += diff / tau ** 2 - ratio / tau
    grad_tau = float(np.sum(-1.0 / tau + diff ** 2 / tau ** 3 + ratio * previous / tau ** 2))
    return float(value), grad, grad_tau


class ConfoundModel(LogDensityModel):
    """
    Log posterior of the binned confounding model in unconstrained coordinates.

    Layout: K entries per coefficient chain (u-loadings on the log scale), one
    log-scale tau per chain, then one latent u per unit. With ``pin_loadings``
    the u-loading chains and the latents are removed, which leaves the
    no-confounding model.
    """

    def __init__(self, d: Dataset, nz: NuisanceEstimates, bins: BinAssignment, sigma_tau=1.0,
                 pin_loadings=False):
        nz.check_aligned(d)
        bins.check_aligned(len(d))
        if not sigma_tau > 0:
            raise DomainError(f"sigma_tau must be positive, got {sigma_tau!r}.")
        self.n = len(d)
        self.K = bins.K
        self.sigma_tau = float(sigma_tau)
        self.pin_loadings = bool(pin_loadings)
        self.chains = tuple(c for c in CHAINS if not (pin_loadings and c in LOADINGS))
        self.bins = bins
        self._k = bins.index
        self._t = d.treatment.astype(float)
        self._y = d.outcome.astype(float)
        self._mu0 = np.asarray(nz.mu0_hat, dtype=float)
        self._mu1 = np.asarray(nz.mu1_hat, dtype=float)
        self._e = np.asarray(nz.e_hat, dtype=float)
        self._tau_offset = len(self.chains) * self.K
        self._u_offset = self._tau_offset + len(self.chains)
        self.dimension = self._u_offset + (0 if pin_loadings else self.n)
        self.parameter_names = (
            [f"{c}[{k}]" for c in self.chains for k in range(1, self.K + 1)]
            + [f"tau[{c}]" for c in self.chains]
            + ([] if pin_loadings else [f"u[{i}]" for i in d.ids])
        )

    def _blocks(self, x):
        """
        Constrained coefficient blocks, taus and latents. ``x`` may carry leading
        draw axes.
        """
        x = np.asarray(x, dtype=float)
        lead = x.shape[:-1]
        blocks = {}
        for j, name in enumerate(self.chains):
            raw = x[..., j * self.K:(j + 1) * self.K]
            blocks[name] = np.exp(raw) if name in LOADINGS else raw
        for name in LOADINGS:
            blocks.setdefault(name, np.zeros(lead + (self.K,)))
        tau = np.exp(x[..., self._tau_offset:self._u_offset])
        u = np.zeros(lead + (self.n,)) if self.pin_loadings else x[..., self._u_offset:]
        return blocks, tau, u

    def constrained(self, x) -> ConfoundParams:
        blocks, tau, u = self._blocks(x)
        return ConfoundParams(tau=tau, u=u, **blocks)

    def pack(self, params: ConfoundParams):
        parts = [np.log(params.chain(c)) if c in LOADINGS else np.asarray(params.chain(c), dtype=float)
                 for c in self.chains]
        tau = np.asarray(params.tau, dtype=float)
        if tau.size != len(self.chains):
            raise AlignmentError(what="tau", got=tau.size, expected=len(self.chains))
        parts.append(np.log(tau))
        if not self.pin_loadings:
            parts.append(np.asarray(params.u, dtype=float))
        return np.concatenate(parts)

    def _bin_sum(self, weights):
        return np.bincount(self._k, weights=weights, minlength=self.K)

    def log_likelihood(self, x):
        """
        Bernoulli-logit likelihood of treatments and observed outcomes; the
        gradient is taken in unconstrained coordinates.
        """
        blocks, _, u = self._blocks(x)
        k, t, y = self._k, self._t, self._y
        eta_t = blocks["gamma_0"][k] + blocks["gamma_ehat"][k] * self._e + blocks["gamma_u"][k] * u
        treated = t == 1
        eta_y = np.where(
            treated,
            blocks["beta_0"][k] + blocks["beta_mu1"][k] * self._mu1 + blocks["beta_u"][k] * u,
            blocks["alpha_0"][k] + blocks["alpha_mu0"][k] * self._mu0 + blocks["alpha_u"][k] * u,
        )
        value = np.sum(t * eta_t - np.logaddexp(0.0, eta_t)) + np.sum(y * eta_y - np.logaddexp(0.0, eta_y))

        r_t = t - special.expit(eta_t)
        r_y = y - special.expit(eta_y)
        r_a = np.where(treated, 0.0, r_y)
        r_b = np.where(treated, r_y, 0.0)
        block_grads = {
            "gamma_0": self._bin_sum(r_t),
            "gamma_ehat": self._bin_sum(r_t * self._e),
            "gamma_u": self._bin_sum(r_t * u),
            "alpha_0": self._bin_sum(r_a),
            "alpha_mu0": self._bin_sum(r_a * self._mu0),
            "alpha_u": self._bin_sum(r_a * u),
            "beta_0": self._bin_sum(r_b),
            "beta_mu1": self._bin_sum(r_b * self._mu1),
            "beta_u": self._bin_sum(r_b * u),
        }
        grad = np.zeros(self.dimension)
        for j, name in enumerate(self.chains):
            g = block_grads[name]
            grad[j * self.K:(j + 1) * self.K] = g * blocks[name] if name in LOADINGS else g
        if not self.pin_loadings:
            grad[self._u_offset:] = (r_t * blocks["gamma_u"][k] + r_a * blocks["alpha_u"][k]
                                     + r_b * blocks["beta_u"][k])
        return float(value), grad

    def log_prior(self, x):
        """
        Random-walk priors on every chain, half-normal scales, standard normal
        latents, and the log-Jacobians of the log transforms.
        """
        x = np.asarray(x, dtype=float)
        blocks, tau, u = self._blocks(x)
        grad = np.zeros(self.dimension)
        value = 0.0
        for j, name in enumerate(self.chains):
            block = slice(j * self.K, (j + 1) * self.K)
            if name in LOADINGS:
                v, g, g_tau = positive_random_walk_log_prior(blocks[name], tau[j])
                value += v + float(np.sum(x[block]))
                grad[block] = g * blocks[name] + 1.0
            else:
                v, g, g_tau = random_walk_log_prior(blocks[name], tau[j])
                value += v
                grad[block] = g
            value += LOG_2 - 0.5 * (tau[j] / self.sigma_tau) ** 2 - math.log(self.sigma_tau) - LOG_SQRT_2PI
            value += math.log(tau[j])
            g_tau -= tau[j] / self.sigma_tau ** 2
            grad[self._tau_offset + j] = g_tau * tau[j] + 1.0
        if not self.pin_loadings:
            value += float(np.sum(-0.5 * u ** 2)) - self.n * LOG_SQRT_2PI
            grad[self._u_offset:] = -u
        return float(value), grad

    def value_and_gradient(self, x):
        like, g_like = self.log_likelihood(x)
        prior, g_prior = self.log_prior(x)
        return like + prior, g_like + g_prior


def log_posterior(x, d: Dataset, nz: NuisanceEstimates, bins: BinAssignment, spec: SensitivitySpec):
    return ConfoundModel(d, nz, bins, spec.sigma_tau).value_and_gradient(x)


def _gate(draws: PosteriorDraws):
    fail = float(get_setting("POLICY_SENSITIVITY_RHAT_FAIL", 1.1))
    clean = float(get_setting("POLICY_SENSITIVITY_RHAT_CLEAN", 1.05))
    worst = draws.max_rhat
    if np.isnan(worst):
        return draws.status
    if worst > fail:
        logger.error("R-hat gate failed: max R-hat %.3f > %.2f", worst, fail)
        return "failed"
    if worst > clean or draws.status == "warning":
        logger.warning("Sampler finished with warnings: max R-hat %.3f, %d divergences", worst, draws.divergences)
        return "warning"
    return "clean"


def fit_sensitivity(d: Dataset, nz: NuisanceEstimates, spec: SensitivitySpec = SensitivitySpec(),
                    pin_loadings=False) -> PosteriorDraws:
    """
    Samples the confounding model on ``d``. The returned draws carry status
    "failed" when any R-hat exceeds the fail gate.
    """
    spec.validate()
    bins = bin_by_risk(nz.mu0_hat, spec.K, ids=d.ids)
    model = ConfoundModel(d, nz, bins, spec.sigma_tau, pin_loadings=pin_loadings)
    logger.info("Fitting confounding model: n=%d, K=%d, sigma_tau=%g, %d parameters",
                len(d), spec.K, spec.sigma_tau, model.dimension)
    draws = sample(model, spec.sampler)
    draws.status = _gate(draws)
    draws.attrs.update({
        "K": spec.K,
        "sigma_tau": spec.sigma_tau,
        "pin_loadings": bool(pin_loadings),
        "bins": bins.k,
    })
    return draws


def _model_for(draws: PosteriorDraws, d, nz, bins):
    if bins is None:
        bins = BinAssignment(K=int(draws.attrs["K"]), k=np.asarray(draws.attrs["bins"], dtype=np.int64))
    model = ConfoundModel(d, nz, bins, float(draws.attrs.get("sigma_tau", 1.0)),
                          pin_loadings=bool(draws.attrs.get("pin_loadings", False)))
    if model.dimension != draws.draws.shape[-1]:
        raise AlignmentError(what="Posterior draws", got=draws.draws.shape[-1], expected=model.dimension)
    return model


def posterior_policy_value(draws: PosteriorDraws, d: Dataset, nz: NuisanceEstimates,
                           bins: Optional[BinAssignment], pi: Policy):
    """
    One policy value per posterior draw. Units where the policy matches the
    recorded treatment contribute their outcome; the others contribute the
    model's counterfactual probability at that draw.
    """
    model = _model_for(draws, d, nz, bins)
    pi.check_aligned(len(d))
    blocks, _, u = model._blocks(draws.flat())
    decisions = pi.decisions
    disagree = decisions != d.treatment
    observed = float(d.outcome[~disagree].sum())
    k = model._k

    release = np.flatnonzero(disagree & (decisions == 0))
    kr = k[release]
    p0 = special.expit(blocks["alpha_0"][:, kr] + blocks["alpha_mu0"][:, kr] * model._mu0[release]
                       + blocks["alpha_u"][:, kr] * u[:, release])
    detain = np.flatnonzero(disagree & (decisions == 1))
    kd = k[detain]
    p1 = special.expit(blocks["beta_0"][:, kd] + blocks["beta_mu1"][:, kd] * model._mu1[detain]
                       + blocks["beta_u"][:, kd] * u[:, detain])
    return (observed + p0.sum(axis=1) + p1.sum(axis=1)) / len(d)


def posterior_subgroup_ate(draws: PosteriorDraws, d: Dataset, nz: NuisanceEstimates,
                           bins: Optional[BinAssignment], G, name="G"):
    return subgroup_ate(d, G, lambda pi: posterior_policy_value(draws, d, nz, bins, pi), name=name)


def summarize_draws(samples):
    samples = np.asarray(samples, dtype=float)
    summary = {key: float(np.quantile(samples, q)) for key, q in QUANTILES.items()}
    summary["mean"] = float(samples.mean())
    summary["sd"] = float(samples.std(ddof=1)) if samples.size > 1 else 0.0
    return summary


def sensitivity_curve(draws, d, nz, bins, policies) -> pd.DataFrame:
    """
    Band table: one row per policy with posterior quantiles of its value.
    """
    rows = []
    for pi in policies:
        row = {"threshold": pi.cutoff, "release_rate": pi.release_rate}
        row.update(summarize_draws(posterior_policy_value(draws, d, nz, bins, pi)))
        rows.append(row)
    return pd.DataFrame(rows, columns=["threshold", "release_rate", *QUANTILES, "mean", "sd"])


def prior_robustness(d, nz, policies, Ks=(5, 10, 20), sigma_taus=(0.5, 1.0, 2.0),
                     sampler: SamplerConfig = SamplerConfig()) -> pd.DataFrame:
    """
    Refits the model for every (K, sigma_tau) pair and stacks the band tables.
    """
    frames = []
    for K in Ks:
        for sigma_tau in sigma_taus:
            spec = SensitivitySpec(K=int(K), sigma_tau=float(sigma_tau), sampler=sampler)
            draws = fit_sensitivity(d, nz, spec)
            curve = sensitivity_curve(draws, d, nz, None, policies)
            curve.insert(0, "sigma_tau", float(sigma_tau))
            curve.insert(0, "K", int(K))
            curve["status"] = draws.status
            frames.append(curve)
    return pd.concat(frames, ignore_index=True)


def prior_robustness_check(table: pd.DataFrame) -> pd.DataFrame:
    """
    Per threshold: spread of posterior medians across prior settings against the
    narrowest 50% band.
    """
    grouped = table.assign(width50=table["q75"] - table["q25"]).groupby("threshold", sort=True)
    check = pd.DataFrame({
        "median_spread": grouped["q50"].max() - grouped["q50"].min(),
        "min_width50": grouped["width50"].min(),
    }).reset_index()
    check["robust"] = check["median_spread"] < check["min_width50"]
    return check


def simulate_confounded(n, K, seed, tau=0.2):
    """
    Draws a dataset from the confounding model itself, with smooth known
    coefficient chains. Returns (dataset, nuisance estimates, bins, parameters).
    """
    rng = np.random.default_rng(seed)
    ids = np.arange(1, n + 1)
    mu0 = rng.uniform(0.05, 0.45, n)
    mu1 = np.clip(0.7 * mu0 + rng.normal(0.0, 0.03, n), 0.02, 0.6)
    e = rng.uniform(0.15, 0.6, n)
    bins = bin_by_risk(mu0, K, ids)
    grid = np.linspace(-1.0, 1.0, K) if K > 1 else np.zeros(1)
    params = ConfoundParams(
        alpha_0=-2.0 + 0.2 * grid, alpha_mu0=np.full(K, 3.0), alpha_u=np.full(K, 0.5),
        beta_0=-2.2 + 0.1 * grid, beta_mu1=np.full(K, 3.0), beta_u=np.full(K, 0.4),
        gamma_0=-1.5 + 0.1 * grid, gamma_ehat=np.full(K, 2.0), gamma_u=np.full(K, 0.5),
        tau=np.full(len(CHAINS), tau), u=rng.standard_normal(n),
    )
    k = bins.index
    t = rng.uniform(size=n) < special.expit(params.gamma_0[k] + params.gamma_ehat[k] * e + params.gamma_u[k] * params.u)
    eta_y = np.where(
        t,
        params.beta_0[k] + params.beta_mu1[k] * mu1 + params.beta_u[k] * params.u,
        params.alpha_0[k] + params.alpha_mu0[k] * mu0 + params.alpha_u[k] * params.u,
    )
    y = rng.uniform(size=n) < special.expit(eta_y)
    d = Dataset(("mu0_hat",), ids, mu0[:, None], t.astype(np.int8), y.astype(np.int8),
                provenance=f"confound-model, seed={seed}")
    return d, NuisanceEstimates(ids, mu0, mu1, e), bins, params
