"""
Command-line entry point: ``policy-sensitivity <command> [options]``.

Exit codes: 0 success, 2 validation or configuration error, 3 convergence
failure, 4 I/O error or missing upstream artifact.
"""
import argparse
import logging
import sys

from .commands import COMMANDS
from . import conf
from .config import RunConfig
from .exceptions import (ArtifactIOError, CalibrationError, ConvergenceError, InitializationError,
                         MissingArtifactError, ValidationError)

logger = logging.getLogger("policy_sensitivity")

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_CONVERGENCE = 3
EXIT_IO = 4


def _split(text):
    return [part.strip() for part in text.split(",") if part.strip()]


def floats(text):
    try:
        return [float(v) for v in _split(text)]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def ints(text):
    try:
        return [int(v) for v in _split(text)]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def names(text):
    return _split(text)


def censorings(text):
    """
    ``age;age,gender`` -> [["age"], ["age", "gender"]]
    """
    return [_split(group) for group in text.split(";") if group.strip()]


OPTIONS = {
    "n": (("--n",), dict(type=int, help="number of synthetic units")),
    "scenario": (("--scenario",), dict(help="scenario preset JSON")),
    "covariates": (("--covariates",), dict(type=names, help="observed covariates, comma-separated")),
    "fractions": (("--fractions",), dict(type=floats, help="policy,nuisance,eval fold fractions")),
    "eval_size": (("--eval-size",), dict(type=int, help="fixed evaluation fold size")),
    "lambda_grid": (("--lambda-grid",), dict(type=floats, help="lasso penalties to cross-validate")),
    "cv_folds": (("--cv-folds",), dict(type=int, help="cross-validation folds")),
    "thresholds": (("--thresholds",), dict(type=floats, help="policy risk thresholds")),
    "quantiles": (("--quantiles",), dict(type=floats, help="release fractions for quantile policies")),
    "K": (("--K",), dict(type=int, help="number of risk bins")),
    "sigma_tau": (("--sigma-tau",), dict(type=float, help="prior scale of random-walk steps")),
    "chains": (("--chains",), dict(type=int, help="sampler chains")),
    "warmup_iters": (("--warmup",), dict(type=int, dest="warmup_iters", help="warmup iterations per chain")),
    "draw_iters": (("--draws",), dict(type=int, dest="draw_iters", help="kept iterations per chain")),
    "target_accept": (("--target-accept",), dict(type=float, help="step-size adaptation target")),
    "sweep_k": (("--sweep-k",), dict(type=ints, help="K values for the prior-robustness sweep")),
    "sweep_sigma_tau": (("--sweep-sigma-tau",), dict(type=floats, help="sigma_tau values for the sweep")),
    "censorings": (("--censorings",), dict(type=censorings, help="covariate subsets, e.g. 'age;age,gender'")),
    "subgroups": (("--subgroups",), dict(type=names, help="subgroup names, comma-separated")),
}

SAMPLER = ("K", "sigma_tau", "chains", "warmup_iters", "draw_iters", "target_accept")
NUISANCE = ("fractions", "eval_size", "lambda_grid", "cv_folds")

ROUTES = [
    ("synth", "Generate a synthetic truth and its censored observational dataset.",
     ("n", "scenario", "covariates")),
    ("fit-nuisance", "Split folds and fit the risk and nuisance models.", ("covariates",) + NUISANCE),
    ("policies", "Score the evaluation fold and build the threshold policies.", ("covariates", "thresholds")),
    ("evaluate-direct", "Direct policy values (and oracle values when a truth exists).",
     ("covariates", "thresholds")),
    ("sensitivity", "Fit the confounding model and write posterior bands.",
     ("covariates", "thresholds") + SAMPLER + ("sweep_k", "sweep_sigma_tau")),
    ("rr-sweep", "Binary-confounder sensitivity envelopes.", ("covariates", "thresholds")),
    ("subgroup", "Posterior subgroup treatment effects.", ("covariates", "thresholds", "subgroups")),
    ("rank-check", "Learned versus oracle risk rankings and truncated-normal checks.",
     ("covariates", "quantiles", "lambda_grid", "cv_folds")),
    ("validate", "Full pipeline per censoring, scored against the synthetic truth.",
     ("censorings", "thresholds", "subgroups") + NUISANCE + SAMPLER),
    ("report", "Stack all artifacts and summarise diagnostics.", ()),
]


def build_parser():
    parser = argparse.ArgumentParser(prog="policy-sensitivity",
                                     description="Policy evaluation with sensitivity to unmeasured confounding.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="RunConfig JSON; flags override its values")
    common.add_argument("--output-dir", help="artifact directory")
    common.add_argument("--seed", type=int, help="master random seed")
    common.add_argument("--threads", type=int, help="maximum worker threads")
    verbosity = common.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    verbosity.add_argument("-q", "--quiet", action="store_true", help="warnings only")

    subparsers = parser.add_subparsers(dest="command", metavar="command")
    subparsers.required = True
    for name, help_text, options in ROUTES:
        sub = subparsers.add_parser(name, parents=[common], help=help_text, description=help_text)
        sub.set_defaults(options=options)
        for key in options:
            flags, kwargs = OPTIONS[key]
            sub.add_argument(*flags, **kwargs)
    return parser


def configure_logging(verbose=False, quiet=False):
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def load_config(args):
    config = RunConfig.load(args.config) if args.config else RunConfig()
    overrides = {key: getattr(args, key) for key in args.options}
    overrides.update(output_dir=args.output_dir, seed=args.seed, threads=args.threads)
    return config.with_overrides(**overrides)


def main(argv=None):
    args = build_parser().parse_args(argv)
    configure_logging(args.verbose, args.quiet)
    try:
        config = load_config(args)
        if config.threads is not None:
            conf.configure(POLICY_SENSITIVITY_THREADS=config.threads)
        return COMMANDS[args.command](config).run()
    except (ConvergenceError, InitializationError) as exc:
        logger.error("%s", exc)
        return EXIT_CONVERGENCE
    except (ValidationError, CalibrationError) as exc:
        logger.error("%s", exc)
        return EXIT_INVALID
    except (ArtifactIOError, MissingArtifactError) as exc:
        logger.error("%s", exc)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
