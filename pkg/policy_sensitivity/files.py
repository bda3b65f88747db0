import datetime
import hashlib
import json
import logging
import os.path
import posixpath
import zipfile

import numpy as np
import pandas as pd

from .conf import get_setting
from .data import Dataset
from .exceptions import ArtifactIOError, MissingArtifactError, ParseError, ValidationError
from .validators import RESERVED_COLUMNS, DatasetValidator

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.17g"
ZIP_DATE = (1980, 1, 1, 0, 0, 0)

# artifact name -> command that produces it
ARTIFACTS = {
    "truth.csv": "synth",
    "scenario.json": "synth",
    "dataset.csv": "synth",
    "folds.csv": "fit-nuisance",
    "nuisance.csv": "fit-nuisance",
    "nuisance_fits.json": "fit-nuisance",
    "risk_scores.csv": "policies",
    "policies.csv": "policies",
    "direct_values.csv": "evaluate-direct",
    "draws.npz": "sensitivity",
    "sensitivity.csv": "sensitivity",
    "diagnostics.csv": "sensitivity",
    "prior_sweep.csv": "sensitivity",
    "rr_envelopes.csv": "rr-sweep",
    "subgroups.csv": "subgroup",
    "ranking.csv": "rank-check",
    "table_one.csv": "rank-check",
    "truncation.csv": "rank-check",
    "coverage.csv": "validate",
    "subgroup_coverage.csv": "validate",
    "validation_summary.csv": "validate",
    "report.csv": "report",
    "report.json": "report",
}


def _parse_floats(values, column, first_row=1):
    try:
        return np.fromiter((float(v) for v in values), dtype=float, count=len(values))
    except ValueError:
        for row, value in enumerate(values, start=first_row):
            if value.strip() == "":
                raise ValidationError(f"Row {row}: {column} is missing.") from None
            try:
                float(value)
            except ValueError:
                raise ParseError(row=row, column=column, value=value) from None
        raise


def _parse_ids(values, first_row=1):
    ids = np.empty(len(values), dtype=np.int64)
    for row, value in enumerate(values, start=first_row):
        if value.strip() == "":
            raise ValidationError(f"Row {row}: id is missing.")
        try:
            ids[row - first_row] = int(value)
        except (ValueError, OverflowError):
            raise ParseError(row=row, column="id", value=value) from None
    return ids


def load_dataset(path, schema, provenance=None) -> Dataset:
    """
    Reads a dataset CSV whose header holds ``id``, ``treatment``, ``outcome`` and
    exactly the covariates of ``schema`` (in any order). Row order is preserved.
    """
    validator = DatasetValidator(schema)
    validator.validate_schema()
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, na_filter=False, encoding="utf-8")
    except FileNotFoundError as exc:
        raise ArtifactIOError(action="read", path=path, reason=exc.strerror or str(exc)) from exc
    except OSError as exc:
        raise ArtifactIOError(action="read", path=path, reason=str(exc)) from exc
    except pd.errors.EmptyDataError as exc:
        raise ValidationError(f"{path} is empty; a header row is required.") from exc
    validator.validate_header(frame.columns)

    columns = {name: frame[name].tolist() for name in frame.columns}
    ids = _parse_ids(columns["id"])
    treatment = _parse_floats(columns["treatment"], "treatment")
    outcome = _parse_floats(columns["outcome"], "outcome")
    validator.validate_binary(treatment, "treatment")
    validator.validate_binary(outcome, "outcome")
    covariates = np.column_stack([_parse_floats(columns[name], name) for name in schema]) \
        if schema else np.empty((len(frame), 0))

    d = Dataset(
        schema,
        ids,
        covariates,
        treatment.astype(np.int8),
        outcome.astype(np.int8),
        provenance=provenance if provenance is not None else f"csv:{os.path.basename(str(path))}",
    )
    logger.info("Loaded %d records with %d covariates from %s", len(d), len(schema), path)
    return d


def dataset_frame(d: Dataset) -> pd.DataFrame:
    frame = pd.DataFrame({
        "id": d.ids,
        "treatment": d.treatment.astype(int),
        "outcome": d.outcome.astype(int),
    })
    for j, name in enumerate(d.schema):
        frame[name] = d.covariates[:, j]
    return frame


def _to_csv(frame, path):
    try:
        frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n", encoding="utf-8")
    except OSError as exc:
        raise ArtifactIOError(action="write", path=path, reason=exc.strerror or str(exc)) from exc


def write_dataset(d: Dataset, path):
    _to_csv(dataset_frame(d), path)
    logger.info("Wrote %d records to %s", len(d), path)


def write_results(table, path):
    """
    Writes a named-column table (a DataFrame or a mapping of columns) as tidy CSV,
    one estimate per row, floats rendered losslessly.
    """
    frame = table if isinstance(table, pd.DataFrame) else pd.DataFrame(dict(table))
    _to_csv(frame, path)
    logger.info("Wrote %d rows to %s", len(frame), path)


def read_results(path) -> pd.DataFrame:
    try:
        return pd.read_csv(path, float_precision="round_trip", encoding="utf-8")
    except OSError as exc:
        raise ArtifactIOError(action="read", path=path, reason=exc.strerror or str(exc)) from exc


def config_hash(payload) -> str:
    text = json.dumps(payload, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def package_versions():
    import django
    import joblib
    import scipy
    import sklearn

    from . import __version__
    return {
        "policy_sensitivity": __version__,
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "pandas": pd.__version__,
        "joblib": joblib.__version__,
        "scikit-learn": sklearn.__version__,
        "django": django.__version__,
    }


class ArtifactStore:
    """
    Handles artifact saving and lookup inside one output directory.

    Every command reads its inputs through ``require`` so that a missing upstream
    artifact names the command that produces it. Manifests go to a configurable
    subdirectory.
    """

    def __init__(self, directory):
        self.directory = str(directory)
        self.manifest_subdirectory = get_setting("POLICY_SENSITIVITY_MANIFEST_SUBDIRECTORY", "manifests")

    def path(self, name):
        return posixpath.join(self.directory, name)

    def exists(self, name):
        return os.path.exists(self.path(name))

    def require(self, name):
        """
        Returns the path of an artifact that must already exist.
        """
        if not self.exists(name):
            raise MissingArtifactError(name=name, directory=self.directory, command=ARTIFACTS.get(name, "synth"))
        return self.path(name)

    def ensure_directory(self):
        try:
            os.makedirs(posixpath.join(self.directory, self.manifest_subdirectory), exist_ok=True)
        except OSError as exc:
            raise ArtifactIOError(action="create", path=self.directory, reason=exc.strerror or str(exc)) from exc

    def write_results(self, name, table):
        self.ensure_directory()
        write_results(table, self.path(name))
        return self.path(name)

    def read_results(self, name):
        return read_results(self.require(name))

    def write_json(self, name, payload):
        self.ensure_directory()
        path = self.path(name)
        try:
            with open(path, "w", encoding="utf-8", newline="\n") as fh:
                json.dump(_finite_or_none(payload), fh, indent=2, sort_keys=True, allow_nan=False,
                          default=_json_default)
                fh.write("\n")
        except OSError as exc:
            raise ArtifactIOError(action="write", path=path, reason=exc.strerror or str(exc)) from exc
        return path

    def read_json(self, name):
        path = self.require(name)
        try:
            with open(path, encoding="utf-8") as fh:
                return json.load(fh)
        except OSError as exc:
            raise ArtifactIOError(action="read", path=path, reason=exc.strerror or str(exc)) from exc

    def save_arrays(self, name, **arrays):
        self.ensure_directory()
        path = self.path(name)
        try:
            with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as archive:
                for key, array in arrays.items():
                    # fixed member dates keep reruns byte-identical
                    info = zipfile.ZipInfo(f"{key}.npy", date_time=ZIP_DATE)
                    with archive.open(info, "w", force_zip64=True) as fh:
                        np.lib.format.write_array(fh, np.asanyarray(array), allow_pickle=False)
        except OSError as exc:
            raise ArtifactIOError(action="write", path=path, reason=exc.strerror or str(exc)) from exc
        return path

    def load_arrays(self, name):
        path = self.require(name)
        try:
            with np.load(path, allow_pickle=False) as archive:
                return {key: archive[key] for key in archive.files}
        except OSError as exc:
            raise ArtifactIOError(action="read", path=path, reason=exc.strerror or str(exc)) from exc

    def write_manifest(self, command, payload, outputs):
        """
        Records the config hash, package versions and outputs of a command run.
        """
        manifest = {
            "command": command,
            "config_hash": config_hash(payload),
            "config": payload,
            "versions": package_versions(),
            "outputs": sorted(outputs),
            "created": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        }
        return self.write_json(posixpath.join(self.manifest_subdirectory, f"{command}.json"), manifest)

    def collect(self, names):
        """
        Stacks tidy CSV artifacts into one long table with an ``artifact`` column.
        """
        frames = []
        for name in names:
            frame = self.read_results(name)
            frame.insert(0, "artifact", name)
            frames.append(frame)
        if not frames:
            return pd.DataFrame({"artifact": []})
        return pd.concat(frames, ignore_index=True, sort=False)


def _finite_or_none(value):
    # JSON has no NaN or Infinity
    if isinstance(value, dict):
        return {key: _finite_or_none(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [_finite_or_none(item) for item in value]
    if isinstance(value, np.ndarray):
        return _finite_or_none(value.tolist())
    if isinstance(value, (float, np.floating)) and not np.isfinite(value):
        return None
    return value


def _json_default(value):
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (set, frozenset, tuple)):
        return sorted(value) if isinstance(value, (set, frozenset)) else list(value)
    raise TypeError(f"Object of type {type(value).__name__} is not JSON serializable")


__all__ = [
    "ARTIFACTS", "ArtifactStore", "RESERVED_COLUMNS", "config_hash", "dataset_frame", "load_dataset",
    "read_results", "write_dataset", "write_results",
]
