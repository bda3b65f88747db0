"""
Adaptive Hamiltonian Monte Carlo over an unconstrained log density.

Step size is tuned during warmup by dual averaging, a diagonal inverse metric is
estimated from the second half of warmup, and each transition integrates a
uniformly jittered number of leapfrog steps. Chains run concurrently, each on its
own random stream spawned from the master seed.
"""
import logging
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy import fft, special, stats

from .conf import get_setting, get_threads
from .exceptions import DomainError, InitializationError, InsufficientDataError

logger = logging.getLogger(__name__)

MAX_DELTA_H = 1000.0


class LogDensityModel(ABC):
    """
    A differentiable log density on R^dimension. Constrained parameters must be
    transformed by the model, log-Jacobian included.
    """
    dimension: int
    parameter_names: Sequence[str]

    @abstractmethod
    def value_and_gradient(self, x):
        """
        Returns (log density up to a constant, gradient).
        """


class FunctionModel(LogDensityModel):

    def __init__(self, value_and_gradient: Callable, dimension: int, parameter_names=None):
        if dimension < 1:
            raise DomainError(f"Model dimension must be at least 1, got {dimension}.")
        self._function = value_and_gradient
        self.dimension = int(dimension)
        self.parameter_names = list(parameter_names or [f"x[{i}]" for i in range(dimension)])

    def value_and_gradient(self, x):
        return self._function(x)


@dataclass(frozen=True)
class SamplerConfig:
    chains: int = 4
    warmup_iters: int = 1000
    draw_iters: int = 1000
    seed: int = 0
    target_accept: float = 0.8
    trajectory_length: float = 1.0
    max_steps: int = 1024
    init_radius: float = 2.0
    max_init_attempts: int = 100
    n_jobs: Optional[int] = None

    def validate(self):
        if self.chains < 1 or self.draw_iters < 1 or self.warmup_iters < 0:
            raise DomainError("Sampler needs at least one chain and one draw.")
        if not 0.0 < self.target_accept < 1.0:
            raise DomainError(f"target_accept must lie in (0, 1), got {self.target_accept!r}.")
        if self.trajectory_length <= 0 or self.max_steps < 1:
            raise DomainError("Trajectory length and max_steps must be positive.")


@dataclass
class PosteriorDraws:
    """
    Post-warmup draws (chains x iterations x dimension) with per-transition
    statistics and per-parameter convergence diagnostics.
    """
    draws: np.ndarray
    parameter_names: list
    accept_stat: np.ndarray
    divergent: np.ndarray
    n_steps: np.ndarray
    step_size: np.ndarray
    inv_metric: np.ndarray
    rhat: np.ndarray
    ess: np.ndarray
    status: str = "ok"
    attrs: dict = field(default_factory=dict)

    @property
    def n_chains(self):
        return self.draws.shape[0]

    @property
    def n_draws(self):
        return self.draws.shape[0] * self.draws.shape[1]

    @property
    def divergences(self):
        return int(self.divergent.sum())

    @property
    def divergence_rate(self):
        return float(self.divergent.mean())

    @property
    def max_rhat(self):
        finite = self.rhat[np.isfinite(self.rhat)]
        return float(finite.max()) if finite.size else float("nan")

    def flat(self):
        """
        Draws stacked chain after chain: shape (chains * iterations, dimension).
        """
        return self.draws.reshape(-1, self.draws.shape[-1])

    def index(self, name):
        return self.parameter_names.index(name)

    def summary(self):
        flat = self.flat()
        return pd.DataFrame({
            "parameter": self.parameter_names,
            "mean": flat.mean(axis=0),
            "sd": flat.std(axis=0, ddof=1) if flat.shape[0] > 1 else np.zeros(flat.shape[1]),
            "rhat": self.rhat,
            "ess": self.ess,
        })

    def to_frame(self):
        """
        Long draw dump: one row per (chain, iteration, parameter).
        """
        chains, iters, dim = self.draws.shape
        return pd.DataFrame({
            "chain": np.repeat(np.arange(chains), iters * dim),
            "iteration": np.tile(np.repeat(np.arange(iters), dim), chains),
            "parameter": np.tile(np.asarray(self.parameter_names, dtype=object), chains * iters),
            "value": self.draws.reshape(-1),
        })

    def to_arrays(self):
        arrays = {
            "draws": self.draws,
            "parameter_names": np.asarray(self.parameter_names, dtype=str),
            "accept_stat": self.accept_stat,
            "divergent": self.divergent,
            "n_steps": self.n_steps,
            "step_size": self.step_size,
            "inv_metric": self.inv_metric,
            "rhat": self.rhat,
            "ess": self.ess,
            "status": np.asarray(self.status),
        }
        for key, value in self.attrs.items():
            arrays[f"attr_{key}"] = np.asarray(value)
        return arrays

    @classmethod
    def from_arrays(cls, arrays):
        attrs = {key[5:]: arrays[key].item() if arrays[key].ndim == 0 else arrays[key]
                 for key in arrays if key.startswith("attr_")}
        return cls(
            draws=arrays["draws"],
            parameter_names=[str(v) for v in arrays["parameter_names"]],
            accept_stat=arrays["accept_stat"],
            divergent=arrays["divergent"],
            n_steps=arrays["n_steps"],
            step_size=arrays["step_size"],
            inv_metric=arrays["inv_metric"],
            rhat=arrays["rhat"],
            ess=arrays["ess"],
            status=str(arrays["status"]),
            attrs=attrs,
        )


def leapfrog(model: LogDensityModel, x, p, grad, step_size, n_steps, inv_metric):
    """
    Integrates Hamiltonian dynamics for ``n_steps`` leapfrog steps. Stops early
    (returning a non-finite value) if the density leaves its finite domain.
    """
    x = np.array(x, dtype=float)
    p = np.array(p, dtype=float)
    value = None
    for _ in range(n_steps):
        p = p + 0.5 * step_size * grad
        x = x + step_size * inv_metric * p
        value, grad = model.value_and_gradient(x)
        if not np.isfinite(value) or not np.all(np.isfinite(grad)):
            return x, p, -np.inf, grad
        p = p + 0.5 * step_size * grad
    if value is None:
        value, grad = model.value_and_gradient(x)
    return x, p, float(value), grad


def hamiltonian(value, p, inv_metric):
    return -value + 0.5 * float(np.sum(inv_metric * p * p))


class DualAveraging:
    """
    Step-size adaptation towards a target acceptance statistic.
    """

    def __init__(self, step_size, target, gamma=0.05, t0=10.0, kappa=0.75):
        self.target = target
        self.gamma = gamma
        self.t0 = t0
        self.kappa = kappa
        self.restart(step_size)

    def restart(self, step_size):
        self.mu = math.log(10.0 * step_size)
        self.h_bar = 0.0
        self.log_step_bar = 0.0
        self.t = 0

    def update(self, accept_prob):
        self.t += 1
        weight = 1.0 / (self.t + self.t0)
        self.h_bar = (1.0 - weight) * self.h_bar + weight * (self.target - accept_prob)
        log_step = self.mu - math.sqrt(self.t) / self.gamma * self.h_bar
        eta = self.t ** (-self.kappa)
        self.log_step_bar = eta * log_step + (1.0 - eta) * self.log_step_bar
        return math.exp(log_step)

    @property
    def final_step_size(self):
        return math.exp(self.log_step_bar)


def _accept_prob(h0, h1):
    if not np.isfinite(h1):
        return 0.0
    return float(min(1.0, math.exp(min(0.0, h0 - h1))))


def _initial_step_size(model, x, value, grad, inv_metric, rng):
    """
    Doubles or halves a unit step until one leapfrog step crosses acceptance 1/2.
    """
    step = 1.0
    p = rng.standard_normal(x.size) / np.sqrt(inv_metric)
    h0 = hamiltonian(value, p, inv_metric)
    _, p1, v1, _ = leapfrog(model, x, p, grad, step, 1, inv_metric)
    prob = _accept_prob(h0, hamiltonian(v1, p1, inv_metric) if np.isfinite(v1) else np.inf)
    direction = 1 if prob > 0.5 else -1
    for _ in range(60):
        if direction == 1 and not prob > 0.5:
            break
        if direction == -1 and not prob < 0.5:
            break
        step *= 2.0 ** direction
        _, p1, v1, _ = leapfrog(model, x, p, grad, step, 1, inv_metric)
        prob = _accept_prob(h0, hamiltonian(v1, p1, inv_metric) if np.isfinite(v1) else np.inf)
        if step > 1e7 or step < 1e-10:
            break
    return step


def _initialize(model, config, chain, rng):
    for _ in range(config.max_init_attempts):
        x = rng.uniform(-config.init_radius, config.init_radius, size=model.dimension)
        value, grad = model.value_and_gradient(x)
        if np.isfinite(value) and np.all(np.isfinite(grad)):
            return x, float(value), np.asarray(grad, dtype=float)
    raise InitializationError(chain=chain, attempts=config.max_init_attempts)


def _warmup_windows(warmup):
    """
    Returns (metric_start, metric_end): draws in [start, end) estimate the
    metric; the tail after ``end`` re-tunes the step size alone.
    """
    if warmup < 20:
        return warmup, warmup
    return warmup // 2, warmup - max(warmup // 10, 1)


def _regularized_variance(samples):
    n = samples.shape[0]
    variance = samples.var(axis=0, ddof=1)
    return (n / (n + 5.0)) * variance + 1e-3 * (5.0 / (n + 5.0))


def _max_steps(config, step_size):
    return int(min(config.max_steps, max(1, math.ceil(config.trajectory_length / step_size))))


def _run_chain(model, config: SamplerConfig, chain, seed_sequence):
    rng = np.random.default_rng(seed_sequence)
    dim = model.dimension
    x, value, grad = _initialize(model, config, chain, rng)
    inv_metric = np.ones(dim)
    step = _initial_step_size(model, x, value, grad, inv_metric, rng)
    adapter = DualAveraging(step, config.target_accept)
    metric_start, metric_end = _warmup_windows(config.warmup_iters)
    window = []

    total = config.warmup_iters + config.draw_iters
    draws = np.empty((config.draw_iters, dim))
    accept_stat = np.empty(config.draw_iters)
    divergent = np.zeros(config.draw_iters, dtype=bool)
    n_steps = np.empty(config.draw_iters, dtype=np.int64)
    warmup_divergences = 0

    for it in range(total):
        steps = int(rng.integers(1, _max_steps(config, step) + 1))
        p0 = rng.standard_normal(dim) / np.sqrt(inv_metric)
        h0 = hamiltonian(value, p0, inv_metric)
        x1, p1, v1, g1 = leapfrog(model, x, p0, grad, step, steps, inv_metric)
        h1 = hamiltonian(v1, p1, inv_metric) if np.isfinite(v1) else np.inf
        is_divergent = not np.isfinite(h1) or (h1 - h0) > MAX_DELTA_H
        prob = _accept_prob(h0, h1)
        if rng.uniform() < prob:
            x, value, grad = x1, v1, g1

        if it < config.warmup_iters:
            warmup_divergences += int(is_divergent)
            step = adapter.update(prob)
            if metric_start <= it < metric_end:
                window.append(x.copy())
            if it == metric_end - 1 and len(window) >= 10:
                inv_metric = _regularized_variance(np.asarray(window))
                step = _initial_step_size(model, x, value, grad, inv_metric, rng)
                adapter.restart(step)
                logger.debug("chain %d: metric adapted from %d draws", chain, len(window))
            if it == config.warmup_iters - 1:
                step = adapter.final_step_size
        else:
            k = it - config.warmup_iters
            draws[k] = x
            accept_stat[k] = prob
            divergent[k] = is_divergent
            n_steps[k] = steps

    logger.info("chain %d finished: step size %.4g, mean accept %.3f, %d divergent (%d in warmup)",
                chain, step, accept_stat.mean(), divergent.sum(), warmup_divergences)
    return draws, accept_stat, divergent, n_steps, step, inv_metric


def sample(model: LogDensityModel, config: SamplerConfig = SamplerConfig()) -> PosteriorDraws:
    """
    Draws from ``model`` with adaptive HMC. Output is fully determined by
    (model, config).
    """
    config.validate()
    if model.dimension < 1:
        raise DomainError("Model dimension must be at least 1.")
    seeds = np.random.SeedSequence(config.seed).spawn(config.chains)
    logger.info("Sampling %d chains x (%d warmup + %d draws) in %d dimensions",
                config.chains, config.warmup_iters, config.draw_iters, model.dimension)
    results = Parallel(n_jobs=min(get_threads(config.n_jobs), config.chains), prefer="threads")(
        delayed(_run_chain)(model, config, c, seeds[c]) for c in range(config.chains))
    draws = np.stack([r[0] for r in results])
    posterior = PosteriorDraws(
        draws=draws,
        parameter_names=list(model.parameter_names),
        accept_stat=np.stack([r[1] for r in results]),
        divergent=np.stack([r[2] for r in results]),
        n_steps=np.stack([r[3] for r in results]),
        step_size=np.array([r[4] for r in results]),
        inv_metric=np.stack([r[5] for r in results]),
        rhat=np.full(model.dimension, np.nan),
        ess=np.full(model.dimension, np.nan),
    )
    if config.chains >= 2 and config.draw_iters >= 4:
        posterior.rhat = rhat(draws)
        posterior.ess = ess(draws)
    else:
        logger.warning("Convergence diagnostics need at least 2 chains and 4 draws per chain")
    warn_rate = float(get_setting("POLICY_SENSITIVITY_DIVERGENCE_WARN", 0.01))
    if posterior.divergence_rate > warn_rate:
        posterior.status = "warning"
        logger.warning("%d of %d transitions diverged (%.1f%%)", posterior.divergences,
                       posterior.divergent.size, 100 * posterior.divergence_rate)
    return posterior


def _as_chains(draws):
    draws = np.asarray(draws, dtype=float)
    if draws.ndim == 2:
        draws = draws[:, :, None]
    if draws.ndim != 3:
        raise DomainError("Draws must have shape (chains, iterations[, parameters]).")
    if draws.shape[0] < 2 or draws.shape[1] < 4:
        raise InsufficientDataError(
            f"Diagnostics need at least 2 chains and 4 draws each, got {draws.shape[0]} x {draws.shape[1]}.")
    return draws


def _split(x):
    half = x.shape[1] // 2
    return np.concatenate([x[:, :half], x[:, x.shape[1] - half:]], axis=0)


def _rank_normalize(x):
    ranks = stats.rankdata(x, method="average").reshape(x.shape)
    return special.ndtri((ranks - 0.375) / (x.size + 0.25))


def _classic_rhat(x):
    m, n = x.shape
    within = x.var(axis=1, ddof=1).mean()
    between = n * x.mean(axis=1).var(ddof=1)
    if within <= 0:
        return np.nan
    return float(np.sqrt(((n - 1) / n * within + between / n) / within))


def _rhat_one(x):
    if np.ptp(x) == 0:
        return np.nan
    split = _split(x)
    bulk = _classic_rhat(_rank_normalize(split))
    folded = np.abs(split - np.median(split))
    tail = _classic_rhat(_rank_normalize(folded)) if np.ptp(folded) > 0 else bulk
    return float(max(bulk, tail))


def rhat(draws):
    """
    Split-chain rank-normalised R-hat per parameter (max of bulk and folded
    versions). Constant parameters give NaN.
    """
    draws = _as_chains(draws)
    values = np.array([_rhat_one(draws[:, :, j]) for j in range(draws.shape[2])])
    if np.any(np.isnan(values)):
        logger.warning("R-hat undefined for %d constant parameter(s)", int(np.isnan(values).sum()))
    return values


def _autocovariance(x):
    n = x.shape[-1]
    size = fft.next_fast_len(2 * n)
    centered = x - x.mean(axis=-1, keepdims=True)
    spectrum = fft.rfft(centered, n=size, axis=-1)
    return fft.irfft(spectrum * np.conjugate(spectrum), n=size, axis=-1)[..., :n] / n


def _ess_one(x):
    m, n = x.shape
    acov = _autocovariance(x)
    chain_mean = x.mean(axis=1)
    mean_var = acov[:, 0].mean() * n / (n - 1.0)
    var_plus = mean_var * (n - 1.0) / n + chain_mean.var(ddof=1)
    if var_plus <= 0:
        return np.nan
    rho = np.zeros(n)
    rho_even = 1.0
    rho[0] = rho_even
    rho_odd = 1.0 - (mean_var - acov[:, 1].mean()) / var_plus
    rho[1] = rho_odd
    t = 1
    while t < n - 3 and rho_even + rho_odd > 0.0:
        rho_even = 1.0 - (mean_var - acov[:, t + 1].mean()) / var_plus
        rho_odd = 1.0 - (mean_var - acov[:, t + 2].mean()) / var_plus
        if rho_even + rho_odd >= 0:
            rho[t + 1] = rho_even
            rho[t + 2] = rho_odd
        t += 2
    max_t = t - 2
    if rho_even > 0:
        rho[max_t + 1] = rho_even
    # initial monotone sequence
    t = 1
    while t <= max_t - 2:
        if rho[t + 1] + rho[t + 2] > rho[t - 1] + rho[t]:
            rho[t + 1] = (rho[t - 1] + rho[t]) / 2.0
            rho[t + 2] = rho[t + 1]
        t += 2
    total = m * n
    tau = -1.0 + 2.0 * rho[:max_t + 1].sum() + rho[max_t + 1:max_t + 2].sum()
    tau = max(tau, 1.0 / np.log10(total))
    return float(total / tau)


def ess(draws):
    """
    Bulk effective sample size per parameter on rank-normalised split chains.
    """
    draws = _as_chains(draws)
    values = np.empty(draws.shape[2])
    for j in range(draws.shape[2]):
        x = draws[:, :, j]
        values[j] = np.nan if np.ptp(x) == 0 else _ess_one(_rank_normalize(_split(x)))
    return values


def check_gradient(model: LogDensityModel, point, step=1e-5):
    """
    Worst error between the analytic gradient and central finite differences,
    relative to max(|analytic|, |numeric|, 1).
    """
    point = np.asarray(point, dtype=float)
    _, grad = model.value_and_gradient(point)
    grad = np.asarray(grad, dtype=float)
    worst = 0.0
    for j in range(point.size):
        shift = np.zeros_like(point)
        shift[j] = step
        upper, _ = model.value_and_gradient(point + shift)
        lower, _ = model.value_and_gradient(point - shift)
        numeric = (upper - lower) / (2.0 * step)
        scale = max(abs(grad[j]), abs(numeric), 1.0)
        worst = max(worst, abs(numeric - grad[j]) / scale)
    return float(worst)
