"""
Observational data model: case records, immutable column-oriented datasets and
deterministic fold splitting.
"""
import logging
import math
from dataclasses import dataclass
from typing import Iterable, Iterator, Optional, Sequence, Tuple

import numpy as np

from .exceptions import DomainError, InsufficientDataError, SchemaError
from .validators import DatasetValidator

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CaseRecord:
    """
    One observational unit. ``treatment`` is 1 when bail was set, ``outcome`` is 1
    on failure to appear.
    """
    id: int
    covariates: Tuple[float, ...]
    treatment: int
    outcome: int


def _frozen(array, dtype):
    array = np.array(array, dtype=dtype, copy=True)
    array.setflags(write=False)
    return array


class Dataset:
    """
    An immutable, column-oriented collection of case records.

    Columns are stored as read-only numpy arrays so a dataset can be shared
    between workers without copying.
    """

    def __init__(self, schema, ids, covariates, treatment, outcome, provenance=""):
        schema = tuple(str(name) for name in schema)
        ids = np.asarray(ids)
        n = ids.shape[0]
        covariates = np.asarray(covariates, dtype=float)
        if covariates.size == 0:
            covariates = covariates.reshape(n, len(schema))
        DatasetValidator(schema)(ids, covariates, np.asarray(treatment), np.asarray(outcome))
        self.schema = schema
        self.ids = _frozen(ids, np.int64)
        self.covariates = _frozen(covariates, float)
        self.treatment = _frozen(treatment, np.int8)
        self.outcome = _frozen(outcome, np.int8)
        self.provenance = provenance

    @classmethod
    def from_records(cls, schema, records: Iterable[CaseRecord], provenance=""):
        records = list(records)
        schema = tuple(schema)
        for row, record in enumerate(records, start=1):
            if len(record.covariates) != len(schema):
                raise SchemaError(f"Row {row}: {len(record.covariates)} covariates, schema declares {len(schema)}.")
        covariates = np.array([r.covariates for r in records], dtype=float).reshape(len(records), len(schema))
        return cls(
            schema,
            ids=[r.id for r in records],
            covariates=covariates,
            treatment=[r.treatment for r in records],
            outcome=[r.outcome for r in records],
            provenance=provenance,
        )

    def __len__(self):
        return int(self.ids.shape[0])

    @property
    def n(self):
        return len(self)

    @property
    def records(self) -> Iterator[CaseRecord]:
        for i in range(len(self)):
            yield CaseRecord(
                id=int(self.ids[i]),
                covariates=tuple(float(v) for v in self.covariates[i]),
                treatment=int(self.treatment[i]),
                outcome=int(self.outcome[i]),
            )

    def column(self, name):
        """
        Returns a covariate (or reserved) column by name.
        """
        if name == "id":
            return self.ids
        if name in ("treatment", "outcome"):
            return getattr(self, name)
        try:
            return self.covariates[:, self.schema.index(name)]
        except ValueError:
            raise SchemaError(f"Unknown covariate {name!r}; schema is {', '.join(self.schema)}.") from None

    def mask_of(self, ids):
        """
        Returns a boolean row mask selecting ``ids``.
        """
        return np.isin(self.ids, np.fromiter(ids, dtype=np.int64) if not isinstance(ids, np.ndarray) else ids)

    def take(self, rows, provenance=None):
        """
        Returns a new dataset made of the given row positions or boolean mask.
        """
        rows = np.asarray(rows)
        if rows.dtype == bool:
            rows = np.flatnonzero(rows)
        return Dataset(
            self.schema,
            self.ids[rows],
            self.covariates[rows],
            self.treatment[rows],
            self.outcome[rows],
            provenance=self.provenance if provenance is None else provenance,
        )

    def subset(self, ids, provenance=None):
        """
        Restricts the dataset to ``ids`` while preserving the original row order.
        """
        return self.take(self.mask_of(ids), provenance=provenance)

    def restrict(self, keep: Sequence[str], provenance=None):
        """
        Keeps only the named covariates, in schema order.
        """
        unknown = [name for name in keep if name not in self.schema]
        if unknown:
            raise SchemaError(f"Unknown covariates: {', '.join(unknown)}.")
        columns = [i for i, name in enumerate(self.schema) if name in set(keep)]
        return Dataset(
            tuple(self.schema[i] for i in columns),
            self.ids,
            self.covariates[:, columns],
            self.treatment,
            self.outcome,
            provenance=self.provenance if provenance is None else provenance,
        )

    def with_outcome(self, outcome, provenance=None):
        return Dataset(self.schema, self.ids, self.covariates, self.treatment, outcome,
                       provenance=self.provenance if provenance is None else provenance)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.schema == other.schema
            and np.array_equal(self.ids, other.ids)
            and np.array_equal(self.covariates, other.covariates)
            and np.array_equal(self.treatment, other.treatment)
            and np.array_equal(self.outcome, other.outcome)
        )

    __hash__ = None

    def __repr__(self):
        return f"<Dataset n={len(self)} schema={list(self.schema)} provenance={self.provenance!r}>"


@dataclass(frozen=True)
class FoldSplit:
    """
    A partition of dataset ids into the policy, nuisance and evaluation folds.
    """
    policy_fold: frozenset
    nuisance_fold: frozenset
    eval_fold: frozenset

    @property
    def sizes(self):
        return len(self.policy_fold), len(self.nuisance_fold), len(self.eval_fold)

    def labels(self, d: Dataset):
        """
        Returns the fold name of every row of ``d``.
        """
        names = np.empty(len(d), dtype=object)
        for name, fold in (("policy", self.policy_fold), ("nuisance", self.nuisance_fold),
                           ("eval", self.eval_fold)):
            names[d.mask_of(np.fromiter(fold, dtype=np.int64, count=len(fold)))] = name
        return names


def _floor(x):
    # guards against 0.29 * 100 == 28.999999999999996
    return int(math.floor(x + 1e-9))


def split_folds(d: Dataset, seed: int, fractions=(0.45, 0.45, 0.10), eval_size: Optional[int] = None) -> FoldSplit:
    """
    Splits the dataset ids into three disjoint folds.

    Sizes follow the floor rule: the policy fold gets floor(n * f_policy), the
    nuisance fold floor(n * f_nuisance), and the remainder goes to evaluation.
    With ``eval_size`` the evaluation fold is fixed first and the remainder is
    divided between the other two folds in proportion to their fractions.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f <= 0 for f in fractions):
        raise DomainError("Fold fractions must be three positive numbers.")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise DomainError(f"Fold fractions must sum to 1, got {sum(fractions)!r}.")
    n = len(d)
    if n < 3:
        raise InsufficientDataError(f"Cannot split {n} units into three folds.")

    if eval_size is None:
        n_policy = _floor(n * fractions[0])
        n_nuisance = _floor(n * fractions[1])
    else:
        if not 1 <= eval_size <= n - 2:
            raise DomainError(f"eval_size must be between 1 and {n - 2}, got {eval_size}.")
        remainder = n - eval_size
        n_policy = _floor(remainder * fractions[0] / (fractions[0] + fractions[1]))
        n_nuisance = remainder - n_policy

    rng = np.random.default_rng(seed)
    permuted = rng.permutation(np.sort(d.ids))
    split = FoldSplit(
        policy_fold=frozenset(int(i) for i in permuted[:n_policy]),
        nuisance_fold=frozenset(int(i) for i in permuted[n_policy:n_policy + n_nuisance]),
        eval_fold=frozenset(int(i) for i in permuted[n_policy + n_nuisance:]),
    )
    logger.info("Split %d units into folds of sizes %s (seed=%s)", n, split.sizes, seed)
    return split
