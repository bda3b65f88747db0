"""
Experiment configuration: a JSON document parsed into ``RunConfig``, with
command-line flags taking precedence over file values.
"""
import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Dict, Optional, Tuple

from .confound import SensitivitySpec
from .exceptions import ArtifactIOError, ConfigError
from .mcmc import SamplerConfig
from .rr_baseline import REGIMES
from .synthetic import CENSORINGS, DEFAULT_THRESHOLDS

logger = logging.getLogger(__name__)

DEFAULT_QUANTILES = tuple(round(0.05 * i, 2) for i in range(21))


@dataclass(frozen=True)
class RunConfig:
    output_dir: str = "out"
    seed: int = 0
    scenario: Optional[str] = None
    n: Optional[int] = None
    covariates: Tuple[str, ...] = ("age",)
    censorings: Tuple[Tuple[str, ...], ...] = CENSORINGS
    fractions: Tuple[float, float, float] = (0.45, 0.45, 0.10)
    eval_size: Optional[int] = None
    lambda_grid: Optional[Tuple[float, ...]] = None
    cv_folds: int = 5
    thresholds: Tuple[float, ...] = DEFAULT_THRESHOLDS
    quantiles: Tuple[float, ...] = DEFAULT_QUANTILES
    K: int = 10
    sigma_tau: float = 1.0
    chains: int = 4
    warmup_iters: int = 1000
    draw_iters: int = 1000
    target_accept: float = 0.8
    sweep_k: Tuple[int, ...] = ()
    sweep_sigma_tau: Tuple[float, ...] = ()
    rr_regimes: Dict[str, float] = field(default_factory=lambda: dict(REGIMES))
    subgroups: Optional[Tuple[str, ...]] = None
    threads: Optional[int] = None

    @classmethod
    def from_dict(cls, payload):
        names = {f.name for f in fields(cls)}
        unknown = set(payload) - names
        if unknown:
            raise ConfigError(f"Unknown configuration keys: {', '.join(sorted(unknown))}.")
        config = cls(**{key: _freeze(value) for key, value in payload.items()})
        config.validate()
        return config

    @classmethod
    def load(cls, path):
        try:
            with open(path, encoding="utf-8") as fh:
                payload = json.load(fh)
        except OSError as exc:
            raise ArtifactIOError(action="read", path=path, reason=exc.strerror or str(exc)) from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
        if not isinstance(payload, dict):
            raise ConfigError(f"{path} must hold a JSON object.")
        return cls.from_dict(payload)

    def with_overrides(self, **overrides):
        """
        Returns a copy with every non-None override applied.
        """
        changes = {key: _freeze(value) for key, value in overrides.items() if value is not None}
        unknown = set(changes) - {f.name for f in fields(self)}
        if unknown:
            raise ConfigError(f"Unknown configuration keys: {', '.join(sorted(unknown))}.")
        config = replace(self, **changes)
        config.validate()
        return config

    def validate(self):
        if len(self.fractions) != 3 or any(f <= 0 for f in self.fractions) or abs(sum(self.fractions) - 1) > 1e-9:
            raise ConfigError(f"fractions must be three positive numbers summing to 1, got {self.fractions}.")
        if self.n is not None and self.n < 3:
            raise ConfigError(f"n must be at least 3, got {self.n}.")
        if self.eval_size is not None and self.eval_size < 1:
            raise ConfigError(f"eval_size must be positive, got {self.eval_size}.")
        if self.lambda_grid is not None and (not self.lambda_grid or any(v < 0 for v in self.lambda_grid)):
            raise ConfigError("lambda_grid must hold nonnegative values.")
        if self.cv_folds < 2:
            raise ConfigError(f"cv_folds must be at least 2, got {self.cv_folds}.")
        for name in ("thresholds", "quantiles"):
            values = getattr(self, name)
            if not values or any(not 0.0 <= v <= 1.0 for v in values):
                raise ConfigError(f"{name} must be a nonempty list of values in [0, 1].")
        if not self.covariates:
            raise ConfigError("covariates must keep at least one covariate.")
        if any(not keep for keep in self.censorings):
            raise ConfigError("Every censoring must keep at least one covariate.")
        if self.K < 1 or any(k < 1 for k in self.sweep_k):
            raise ConfigError("K must be at least 1.")
        if self.sigma_tau <= 0 or any(s <= 0 for s in self.sweep_sigma_tau):
            raise ConfigError("sigma_tau must be positive.")
        if self.chains < 1 or self.warmup_iters < 0 or self.draw_iters < 1:
            raise ConfigError("Sampler needs at least one chain and one draw.")
        if not 0.0 < self.target_accept < 1.0:
            raise ConfigError(f"target_accept must lie in (0, 1), got {self.target_accept}.")
        if not self.rr_regimes or any(cap < 1 for cap in self.rr_regimes.values()):
            raise ConfigError("rr_regimes must map names to caps of at least 1.")
        if self.threads is not None and self.threads < 1:
            raise ConfigError(f"threads must be positive, got {self.threads}.")

    def sampler_config(self, seed_offset=0):
        return SamplerConfig(chains=self.chains, warmup_iters=self.warmup_iters, draw_iters=self.draw_iters,
                             seed=self.seed + seed_offset, target_accept=self.target_accept, n_jobs=self.threads)

    def sensitivity_spec(self):
        return SensitivitySpec(K=self.K, sigma_tau=self.sigma_tau, sampler=self.sampler_config())

    def to_dict(self):
        return asdict(self)


def _freeze(value):
    # JSON arrays map to tuples
    if isinstance(value, list):
        return tuple(_freeze(v) for v in value)
    return value
