import numpy as np

from .exceptions import SchemaError, ValidationError

RESERVED_COLUMNS = ("id", "treatment", "outcome")


class DatasetValidator(object):
    """
    Validation of observational datasets.

    Checks the column layout of a table against an expected covariate schema and
    the values of its reserved columns. Row numbers in messages are 1-based data
    rows (the header is not counted).
    """
    messages = {
        "missing_columns": "Missing columns: {columns}.",
        "extra_columns": "Unexpected columns: {columns}.",
        "reserved": "Covariate name {name!r} clashes with a reserved column.",
        "duplicate_name": "Covariate {name!r} appears more than once in the schema.",
        "binary": "Row {row}: {column} must be 0 or 1, got {value!r}.",
        "duplicate_id": "Row {row}: id {value} is not unique.",
        "width": "Covariate matrix has {width} columns but the schema declares {expected}.",
        "length": "Column {column} has {length} entries, expected {expected}.",
        "missing_value": "Row {row}: covariate {column} is missing.",
        "finite": "Row {row}: covariate {column} is not finite.",
    }

    def __init__(self, schema):
        self.schema = tuple(schema)

    def validate_schema(self):
        seen = set()
        for name in self.schema:
            if name in RESERVED_COLUMNS:
                raise SchemaError(self.messages["reserved"].format(name=name))
            if name in seen:
                raise SchemaError(self.messages["duplicate_name"].format(name=name))
            seen.add(name)

    def validate_header(self, header):
        expected = set(RESERVED_COLUMNS) | set(self.schema)
        got = list(header)
        missing = [c for c in list(RESERVED_COLUMNS) + list(self.schema) if c not in got]
        if missing:
            raise SchemaError(self.messages["missing_columns"].format(columns=", ".join(missing)))
        extra = [c for c in got if c not in expected]
        if extra:
            raise SchemaError(self.messages["extra_columns"].format(columns=", ".join(extra)))
        if len(set(got)) != len(got):
            raise SchemaError(self.messages["extra_columns"].format(
                columns=", ".join(sorted({c for c in got if got.count(c) > 1}))))

    def validate_binary(self, values, column):
        values = np.asarray(values)
        bad = np.flatnonzero((values != 0) & (values != 1))
        if bad.size:
            row = int(bad[0])
            raise ValidationError(self.messages["binary"].format(
                row=row + 1, column=column, value=values[row].item()))

    def validate_ids(self, ids):
        ids = np.asarray(ids)
        _, counts = np.unique(ids, return_counts=True)
        if np.any(counts > 1):
            order = np.argsort(ids, kind="stable")
            sorted_ids = ids[order]
            dup = np.flatnonzero(sorted_ids[1:] == sorted_ids[:-1])
            row = int(order[dup[0] + 1])
            raise ValidationError(self.messages["duplicate_id"].format(row=row + 1, value=int(ids[row])))

    def validate_covariates(self, covariates, n):
        covariates = np.asarray(covariates, dtype=float)
        if covariates.ndim != 2 or covariates.shape[1] != len(self.schema):
            width = covariates.shape[1] if covariates.ndim == 2 else covariates.ndim
            raise SchemaError(self.messages["width"].format(width=width, expected=len(self.schema)))
        if covariates.shape[0] != n:
            raise ValidationError(self.messages["length"].format(
                column="covariates", length=covariates.shape[0], expected=n))
        bad = np.argwhere(~np.isfinite(covariates))
        if bad.size:
            row, col = (int(v) for v in bad[0])
            key = "missing_value" if np.isnan(covariates[row, col]) else "finite"
            raise ValidationError(self.messages[key].format(row=row + 1, column=self.schema[col]))

    def __call__(self, ids, covariates, treatment, outcome):
        self.validate_schema()
        n = len(ids)
        for column, values in (("treatment", treatment), ("outcome", outcome)):
            if len(values) != n:
                raise ValidationError(self.messages["length"].format(
                    column=column, length=len(values), expected=n))
        self.validate_ids(ids)
        self.validate_binary(treatment, "treatment")
        self.validate_binary(outcome, "outcome")
        self.validate_covariates(covariates, n)
