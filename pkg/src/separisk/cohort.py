"""Cohort schema, in-memory container and CSV/schema persistence."""

from __future__ import annotations

import csv
import io
import json
import os
import tempfile
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

RESERVED = ("patient_id", "study_time", "label")
KINDS = ("continuous", "binary", "ordinal")
MODALITIES = ("cd", "edm")


class CohortFormatError(ValueError):
    """Raised for malformed cohort CSV or schema files."""


@dataclass(frozen=True)
class FeatureSpec:
    name: str
    kind: str = "continuous"
    modality: str = "cd"
    physiologic_limits: tuple[float, float] | None = None
    units: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"feature {self.name!r}: unknown kind {self.kind!r}")
        if self.modality not in MODALITIES:
            raise ValueError(f"feature {self.name!r}: unknown modality {self.modality!r}")
        if self.name in RESERVED:
            raise ValueError(f"feature name {self.name!r} is reserved")
        if self.physiologic_limits is not None:
            lo, hi = self.physiologic_limits
            if not lo < hi:
                raise ValueError(f"feature {self.name!r}: limits need lo < hi")

    def to_dict(self):
        d = {"name": self.name, "kind": self.kind, "modality": self.modality}
        if self.physiologic_limits is not None:
            d["physiologic_limits"] = list(self.physiologic_limits)
        if self.units:
            d["units"] = self.units
        return d

    @classmethod
    def from_dict(cls, d):
        lim = d.get("physiologic_limits")
        return cls(
            name=d["name"],
            kind=d.get("kind", "continuous"),
            modality=d.get("modality", "cd"),
            physiologic_limits=tuple(lim) if lim is not None else None,
            units=d.get("units", ""),
        )


@dataclass
class Cohort:
    """Feature matrix with NaN as the missing marker plus per-row metadata."""

    specs: list[FeatureSpec]
    X: np.ndarray
    labels: np.ndarray
    patient_id: np.ndarray = field(default=None)
    study_time: np.ndarray = field(default=None)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = self.X.shape[0]
        if self.X.ndim != 2 or self.X.shape[1] != len(self.specs):
            raise ValueError("row width must equal the number of feature specs")
        names = [s.name for s in self.specs]
        if len(set(names)) != len(names):
            raise ValueError("feature names must be unique")
        if self.labels.shape != (n,) or not np.isin(self.labels, (0, 1)).all():
            raise ValueError("labels must be a binary vector with one entry per row")
        if self.patient_id is None:
            self.patient_id = np.array([f"p{i}" for i in range(n)], dtype=object)
        if self.study_time is None:
            self.study_time = np.zeros(n, dtype="datetime64[s]")
        self.patient_id = np.asarray(self.patient_id, dtype=object)
        self.study_time = np.asarray(self.study_time, dtype="datetime64[s]")

    def __len__(self):
        return self.X.shape[0]

    @property
    def names(self) -> list[str]:
        return [s.name for s in self.specs]

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"feature {name!r} not in cohort") from None

    def spec(self, name: str) -> FeatureSpec:
        return self.specs[self.index(name)]

    def column(self, name: str) -> np.ndarray:
        return self.X[:, self.index(name)]

    def subset(self, rows) -> "Cohort":
        rows = np.asarray(rows)
        return Cohort(list(self.specs), self.X[rows].copy(), self.labels[rows].copy(),
                      self.patient_id[rows].copy(), self.study_time[rows].copy())

    def select_features(self, keep) -> "Cohort":
        keep = list(keep)
        return replace(self, specs=[self.specs[i] for i in keep], X=self.X[:, keep].copy())

    def copy(self) -> "Cohort":
        return self.subset(np.arange(len(self)))


def atomic_write_text(path, text: str) -> None:
    """Write to a temp file in the same directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def fmt_float(v: float) -> str:
    if np.isnan(v):
        return ""
    if float(v).is_integer() and abs(v) < 1e15:
        return str(int(v))
    return repr(float(v))


def save_schema(path, specs: list[FeatureSpec]) -> None:
    atomic_write_text(path, json.dumps({"features": [s.to_dict() for s in specs]}, indent=2) + "\n")


def load_schema(path) -> list[FeatureSpec]:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        return [FeatureSpec.from_dict(d) for d in doc["features"]]
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise CohortFormatError(f"{path}: invalid schema ({exc})") from exc


def write_cohort_csv(path, cohort: Cohort) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(list(cohort.names) + list(RESERVED))
    times = np.datetime_as_string(cohort.study_time, unit="s")
    for i in range(len(cohort)):
        w.writerow([fmt_float(v) for v in cohort.X[i]] + [cohort.patient_id[i], times[i], int(cohort.labels[i])])
    atomic_write_text(path, buf.getvalue())


def _infer_spec(name: str, values: list[str]) -> FeatureSpec:
    from .tabular_prep import DIASTOLIC_CODES

    present = [v.strip() for v in values if v.strip() != ""]
    try:
        nums = {float(v) for v in present}
    except ValueError:
        if all(v.lower() in DIASTOLIC_CODES for v in present):
            return FeatureSpec(name, "ordinal")
        return FeatureSpec(name, "continuous")
    if nums and nums <= {0.0, 1.0}:
        return FeatureSpec(name, "binary")
    return FeatureSpec(name, "continuous")


def read_cohort_csv(path, specs: list[FeatureSpec] | None = None) -> Cohort:
    """Read a cohort CSV; empty fields are missing values.

    Ordinal columns may hold either numeric codes or diastolic-function text
    labels.  Errors name the offending line.
    """
    from .tabular_prep import encode_diastolic

    text = Path(path).read_text(encoding="utf-8")
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise CohortFormatError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    for r in RESERVED:
        if r not in header:
            raise CohortFormatError(f"{path}: line 1: missing reserved column {r!r}")
    feat_names = [h for h in header if h not in RESERVED]
    body = rows[1:]
    for k, r in enumerate(body):
        if len(r) != len(header):
            raise CohortFormatError(f"{path}: line {k + 2}: expected {len(header)} fields, found {len(r)}")
    col = {h: [r[j] for r in body] for j, h in enumerate(header)}
    if specs is None:
        specs = [_infer_spec(n, col[n]) for n in feat_names]
    else:
        by_name = {s.name: s for s in specs}
        missing = [s.name for s in specs if s.name not in col]
        if missing:
            raise CohortFormatError(f"{path}: line 1: columns {missing} declared in schema but absent")
        specs = [by_name[n] for n in feat_names if n in by_name]
    n = len(body)
    X = np.full((n, len(specs)), np.nan)
    for j, s in enumerate(specs):
        for i, v in enumerate(col[s.name]):
            v = v.strip()
            if v == "":
                continue
            try:
                X[i, j] = float(v)
            except ValueError:
                if s.kind == "ordinal":
                    try:
                        X[i, j] = encode_diastolic(v)
                    except ValueError as exc:
                        raise CohortFormatError(f"{path}: line {i + 2}: column {s.name!r}: {exc}") from None
                else:
                    raise CohortFormatError(
                        f"{path}: line {i + 2}: column {s.name!r}: not a number: {v!r}"
                    ) from None
    labels = np.zeros(n, dtype=np.int64)
    for i, v in enumerate(col["label"]):
        if v.strip() not in ("0", "1"):
            raise CohortFormatError(f"{path}: line {i + 2}: label must be 0 or 1, got {v!r}")
        labels[i] = int(v)
    try:
        times = np.array([np.datetime64(v.strip(), "s") if v.strip() else np.datetime64(0, "s")
                          for v in col["study_time"]], dtype="datetime64[s]")
    except ValueError as exc:
        raise CohortFormatError(f"{path}: bad study_time ({exc})") from None
    pid = np.array([v.strip() for v in col["patient_id"]], dtype=object)
    return Cohort(specs, X, labels, pid, times)
