"""
One class per pipeline step. Inputs are loaded lazily from the output directory
and every run ends with a manifest next to the artifacts it wrote.
"""
import logging
from functools import cached_property

import numpy as np
import pandas as pd

from .config import RunConfig
from .confound import (QUANTILES, fit_sensitivity, posterior_subgroup_ate, prior_robustness,
                       prior_robustness_check, sensitivity_curve, summarize_draws)
from .data import FoldSplit, split_folds
from .exceptions import AlignmentError, ConvergenceError, SchemaError
from .files import ArtifactStore, load_dataset, write_dataset
from .glm import GlmFit, NuisanceEstimates, fit_nuisance, fit_risk_model, predict
from .mcmc import PosteriorDraws
from .policy import direct_policy_value, make_policy_family, oracle_policy_value, policy_curve, subgroup_ate
from .rr_baseline import rr_sweep_regimes
from .synthetic import (ScenarioSpec, SyntheticTruth, censor, default_subgroups, generate_truth,
                        run_validation_suite)
from .trunc_rank import compare_groups, ranking_robustness, table_one_risks

logger = logging.getLogger(__name__)

FOLD_NAMES = ("policy", "nuisance", "eval")


class Command:
    """
    Base pipeline step. Subclasses implement ``handle`` and return the names of
    the artifacts they wrote.
    """
    name = None

    def __init__(self, config: RunConfig):
        self.config = config
        self.failure = None

    @cached_property
    def store(self):
        return ArtifactStore(self.config.output_dir)

    @cached_property
    def has_truth(self):
        return self.store.exists("truth.csv")

    @cached_property
    def truth(self):
        return SyntheticTruth.from_frame(self.store.read_results("truth.csv"), seed=self.config.seed)

    @cached_property
    def dataset(self):
        return load_dataset(self.store.require("dataset.csv"), self.config.covariates)

    @cached_property
    def folds(self):
        frame = self.store.read_results("folds.csv")
        groups = {name: frozenset(int(i) for i in frame.loc[frame["fold"] == name, "id"]) for name in FOLD_NAMES}
        return FoldSplit(groups["policy"], groups["nuisance"], groups["eval"])

    @cached_property
    def eval_dataset(self):
        return self.dataset.subset(self.folds.eval_fold)

    @cached_property
    def truth_eval(self):
        if not self.has_truth:
            return None
        truth = self.truth.subset(self.eval_dataset.ids)
        if not np.array_equal(truth.ids, self.eval_dataset.ids):
            raise AlignmentError("truth.csv and dataset.csv list the evaluation units in different orders.")
        return truth

    @cached_property
    def fits(self):
        return {name: GlmFit.from_dict(payload) for name, payload in self.store.read_json("nuisance_fits.json").items()}

    @cached_property
    def nuisance(self):
        nz = NuisanceEstimates.from_frame(self.store.read_results("nuisance.csv"), self.fits)
        nz.check_aligned(self.eval_dataset)
        return nz

    @cached_property
    def risk_scores(self):
        frame = self.store.read_results("risk_scores.csv")
        if not np.array_equal(frame["id"].to_numpy(np.int64), self.eval_dataset.ids):
            raise AlignmentError("risk_scores.csv is not aligned with the evaluation fold.")
        return frame["risk_score"].to_numpy(float)

    @cached_property
    def policies(self):
        return make_policy_family(self.risk_scores, self.config.thresholds)

    @cached_property
    def draws(self):
        return PosteriorDraws.from_arrays(self.store.load_arrays("draws.npz"))

    def handle(self):
        raise NotImplementedError

    def run(self):
        logger.info("Running %s into %s", self.name, self.store.directory)
        self.store.ensure_directory()
        written = self.handle()
        self.store.write_manifest(self.name, self.config.to_dict(), written)
        if self.failure:
            raise ConvergenceError(self.failure)
        return 0


class SynthCommand(Command):
    name = "synth"

    def handle(self):
        config = self.config
        spec = ScenarioSpec.load(config.scenario) if config.scenario else ScenarioSpec()
        if config.n is not None:
            spec = ScenarioSpec(n=config.n, noise_features=spec.noise_features,
                                coefficients=spec.coefficients, targets=spec.targets)
        truth = generate_truth(spec, config.seed)
        self.store.write_results("truth.csv", truth.to_frame())
        self.store.write_json("scenario.json", spec.to_dict())
        write_dataset(censor(truth, config.covariates), self.store.path("dataset.csv"))
        return ["truth.csv", "scenario.json", "dataset.csv"]


class FitNuisanceCommand(Command):
    name = "fit-nuisance"

    def handle(self):
        config, d = self.config, self.dataset
        folds = split_folds(d, config.seed, config.fractions, config.eval_size)
        self.store.write_results("folds.csv", pd.DataFrame({"id": d.ids, "fold": folds.labels(d)}))
        risk = fit_risk_model(d, folds.policy_fold, config.lambda_grid, config.cv_folds, config.seed, config.threads)
        d_eval = d.subset(folds.eval_fold)
        nz = fit_nuisance(d, folds.nuisance_fold, target=d_eval, lambda_grid=config.lambda_grid,
                          cv_folds=config.cv_folds, seed=config.seed + 10, n_jobs=config.threads)
        self.store.write_results("nuisance.csv", nz.to_frame())
        fits = {name: fit.to_dict() for name, fit in nz.source_fits.items()}
        fits["risk"] = risk.to_dict()
        self.store.write_json("nuisance_fits.json", fits)
        return ["folds.csv", "nuisance.csv", "nuisance_fits.json"]


class PoliciesCommand(Command):
    name = "policies"

    def handle(self):
        d_eval = self.eval_dataset
        scores = predict(self.fits["risk"], d_eval)
        self.store.write_results("risk_scores.csv", pd.DataFrame({"id": d_eval.ids, "risk_score": scores}))
        policies = make_policy_family(scores, self.config.thresholds)
        self.store.write_results("policies.csv", pd.DataFrame({
            "threshold": [pi.cutoff for pi in policies],
            "release_rate": [pi.release_rate for pi in policies],
            "n_treated": [int(pi.decisions.sum()) for pi in policies],
        }))
        return ["risk_scores.csv", "policies.csv"]


class EvaluateDirectCommand(Command):
    name = "evaluate-direct"

    def handle(self):
        curve = policy_curve(self.eval_dataset, self.policies, self.nuisance, self.truth_eval)
        self.store.write_results("direct_values.csv", curve)
        return ["direct_values.csv"]


class SensitivityCommand(Command):
    name = "sensitivity"

    def handle(self):
        config, d_eval, nz = self.config, self.eval_dataset, self.nuisance
        draws = fit_sensitivity(d_eval, nz, config.sensitivity_spec())
        self.store.save_arrays("draws.npz", **draws.to_arrays())

        bands = sensitivity_curve(draws, d_eval, nz, None, self.policies)
        direct = policy_curve(d_eval, self.policies, nz, self.truth_eval)
        bands.insert(2, "direct_value", direct["direct_value"].to_numpy())
        if "oracle_value" in direct:
            bands.insert(3, "oracle_value", direct["oracle_value"].to_numpy())
        self.store.write_results("sensitivity.csv", bands)
        diagnostics = draws.summary()
        diagnostics["status"] = draws.status
        self.store.write_results("diagnostics.csv", diagnostics)
        written = ["draws.npz", "sensitivity.csv", "diagnostics.csv"]

        if config.sweep_k or config.sweep_sigma_tau:
            sweep = prior_robustness(d_eval, nz, self.policies, Ks=config.sweep_k or (config.K,),
                                     sigma_taus=config.sweep_sigma_tau or (config.sigma_tau,),
                                     sampler=config.sampler_config())
            self.store.write_results("prior_sweep.csv", sweep)
            check = prior_robustness_check(sweep)
            logger.info("Prior sweep robust at %d of %d thresholds", int(check["robust"].sum()), len(check))
            written.append("prior_sweep.csv")

        if draws.status == "failed":
            self.failure = (f"R-hat gate failed (max R-hat {draws.max_rhat:.3f}); "
                            f"see {self.store.path('diagnostics.csv')}")
        return written


class RRSweepCommand(Command):
    name = "rr-sweep"

    def handle(self):
        envelopes = rr_sweep_regimes(self.eval_dataset, self.nuisance, self.policies, self.config.rr_regimes,
                                     n_jobs=self.config.threads)
        self.store.write_results("rr_envelopes.csv", envelopes)
        return ["rr_envelopes.csv"]


class SubgroupCommand(Command):
    name = "subgroup"

    def selected_subgroups(self):
        subgroups = default_subgroups()
        if self.config.subgroups is None:
            return subgroups
        unknown = set(self.config.subgroups) - set(subgroups)
        if unknown:
            raise SchemaError(f"Unknown subgroups: {', '.join(sorted(unknown))}.")
        return {name: subgroups[name] for name in self.config.subgroups}

    def handle(self):
        d_eval, nz, draws = self.eval_dataset, self.nuisance, self.draws
        source = self.truth_eval.base if self.has_truth else d_eval
        rows = []
        for name, predicate in self.selected_subgroups().items():
            try:
                mask = np.asarray(predicate(source), dtype=bool)
            except SchemaError:
                logger.warning("Subgroup %s needs covariates missing from the data; skipped", name)
                continue
            if not mask.any():
                logger.warning("Subgroup %s is empty in the evaluation fold; skipped", name)
                continue
            row = {"subgroup": name, "size": int(mask.sum()),
                   "direct_ate": subgroup_ate(d_eval, mask, lambda pi: direct_policy_value(d_eval, pi, nz).value,
                                              name=name)}
            row.update(summarize_draws(posterior_subgroup_ate(draws, d_eval, nz, None, mask, name=name)))
            if self.has_truth:
                truth = self.truth_eval
                row["oracle_ate"] = subgroup_ate(d_eval, mask, lambda pi: oracle_policy_value(truth, pi), name=name)
            rows.append(row)
        columns = ["subgroup", "size", "direct_ate", *QUANTILES, "mean", "sd"] + \
                  (["oracle_ate"] if self.has_truth else [])
        self.store.write_results("subgroups.csv", pd.DataFrame(rows, columns=columns))
        return ["subgroups.csv"]


class RankCheckCommand(Command):
    name = "rank-check"

    def handle(self):
        config = self.config
        self.store.require("truth.csv")
        ranking = ranking_robustness(self.truth, config.covariates, config.quantiles, config.lambda_grid,
                                     config.cv_folds, config.seed, config.threads)
        self.store.write_results("ranking.csv", ranking)

        risks = table_one_risks()
        self.store.write_results("table_one.csv", pd.DataFrame([
            {"age": age, "true_risk": float(risks[age]["true"]), "learned_risk": float(risks[age]["learned"]),
             "true_fraction": str(risks[age]["true"]), "learned_fraction": str(risks[age]["learned"]),
             "inverted": risks["inverted"]}
            for age in ("young", "old")
        ]))
        self.store.write_results("truncation.csv", compare_groups())
        return ["ranking.csv", "table_one.csv", "truncation.csv"]


class ValidateCommand(Command):
    name = "validate"

    def handle(self):
        config = self.config
        self.store.require("truth.csv")
        caps = dict(config.rr_regimes)
        report = run_validation_suite(
            self.truth, config.censorings, config.sensitivity_spec(), config.thresholds, seed=config.seed,
            fractions=config.fractions, eval_size=config.eval_size, lambda_grid=config.lambda_grid,
            cv_folds=config.cv_folds, subgroups=SubgroupCommand(config).selected_subgroups(), rr_caps=caps,
            rr_regime=min(caps, key=caps.get), n_jobs=config.threads,
        )
        self.store.write_results("coverage.csv", report.coverage)
        self.store.write_results("subgroup_coverage.csv", report.subgroups)
        self.store.write_results("validation_summary.csv", report.summary)
        failed = report.summary.loc[report.summary["status"] == "failed", "censoring"].tolist()
        if failed:
            self.failure = f"R-hat gate failed for censorings {', '.join(failed)}"
        return ["coverage.csv", "subgroup_coverage.csv", "validation_summary.csv"]


class ReportCommand(Command):
    name = "report"
    required = ("direct_values.csv", "sensitivity.csv", "diagnostics.csv", "rr_envelopes.csv", "subgroups.csv")
    optional = ("prior_sweep.csv", "ranking.csv", "table_one.csv", "truncation.csv", "coverage.csv",
                "subgroup_coverage.csv", "validation_summary.csv")

    def handle(self):
        for name in self.required:
            self.store.require(name)
        present = list(self.required) + [name for name in self.optional if self.store.exists(name)]
        self.store.write_results("report.csv", self.store.collect(present))

        draws = self.draws
        summary = {
            "status": draws.status,
            "max_rhat": draws.max_rhat,
            "min_ess": float(np.nanmin(draws.ess)) if np.any(np.isfinite(draws.ess)) else None,
            "divergences": draws.divergences,
            "divergence_rate": draws.divergence_rate,
            "n_draws": draws.n_draws,
            "artifacts": present,
        }
        if self.store.exists("validation_summary.csv"):
            validation = self.store.read_results("validation_summary.csv")
            summary["coverage"] = dict(zip(validation["censoring"], validation["coverage_fraction"]))
            summary["subgroup_coverage"] = dict(zip(validation["censoring"], validation["subgroup_coverage"]))
        self.store.write_json("report.json", summary)
        return ["report.csv", "report.json"]


COMMANDS = {cls.name: cls for cls in (
    SynthCommand, FitNuisanceCommand, PoliciesCommand, EvaluateDirectCommand, SensitivityCommand,
    RRSweepCommand, SubgroupCommand, RankCheckCommand, ValidateCommand, ReportCommand,
)}
