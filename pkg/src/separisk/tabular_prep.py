"""Cleaning, interpolation, imputation, normalisation and splitting."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np

from .cohort import Cohort, FeatureSpec

log = logging.getLogger(__name__)

DIASTOLIC_CODES = {
    "normal": -1.0,
    "dysfunction": 0.0,
    "dysfunction-ungraded": 0.0,
    "abnormal": 0.0,
    "grade i": 1.0,
    "grade 1": 1.0,
    "grade ii": 2.0,
    "grade 2": 2.0,
    "grade iii": 3.0,
    "grade 3": 3.0,
}
DIASTOLIC_MISSING = {"", "missing", "na", "nan", "none"}
DIASTOLIC_CLASSES = (-1.0, 0.0, 1.0, 2.0, 3.0)


def clean_outliers(values, spec: FeatureSpec) -> np.ndarray:
    """Return a copy with implausible values replaced by NaN.

    With physiologic limits, anything outside ``[lo, hi]`` goes.  Without
    limits a value goes only if it is beyond mean +/- 3 sd *and* beyond
    Q1 - 3 IQR / Q3 + 3 IQR, both computed on the incoming column.
    """
    x = np.array(values, dtype=np.float64, copy=True)
    obs = ~np.isnan(x)
    if not obs.any():
        warnings.warn(f"clean_outliers: column {spec.name!r} has no observed values", RuntimeWarning)
        return x
    if spec.physiologic_limits is not None:
        lo, hi = spec.physiologic_limits
        x[obs & ((x < lo) | (x > hi))] = np.nan
        return x
    v = x[obs]
    mean = v.mean()
    sd = v.std(ddof=1) if v.size > 1 else 0.0
    q1, q3 = np.percentile(v, [25, 75])
    iqr = q3 - q1
    rule_sd = np.abs(x - mean) > 3 * sd
    rule_iqr = (x < q1 - 3 * iqr) | (x > q3 + 3 * iqr)
    x[obs & rule_sd & rule_iqr] = np.nan
    return x


def interpolate_patient_series(times, values) -> np.ndarray:
    """Fill interior gaps of one patient's series linearly in time.

    ``times`` must be sorted.  Leading and trailing gaps stay missing.
    """
    t = np.asarray(times, dtype=np.float64)
    v = np.array(values, dtype=np.float64, copy=True)
    obs = ~np.isnan(v)
    if obs.sum() < 2:
        return v
    first, last = np.flatnonzero(obs)[[0, -1]]
    gap = ~obs
    gap[:first] = False
    gap[last + 1 :] = False
    if gap.any():
        v[gap] = np.interp(t[gap], t[obs], v[obs])
    return v


def interpolate_cohort(cohort: Cohort, kinds=("continuous",)) -> Cohort:
    """Apply :func:`interpolate_patient_series` per patient and feature."""
    out = cohort.copy()
    secs = cohort.study_time.astype("int64").astype(np.float64)
    cols = [j for j, s in enumerate(cohort.specs) if s.kind in kinds]
    order = np.lexsort((secs, cohort.patient_id.astype(str)))
    pids = cohort.patient_id[order].astype(str)
    bounds = np.flatnonzero(np.r_[True, pids[1:] != pids[:-1], True])
    for a, b in zip(bounds[:-1], bounds[1:]):
        if b - a < 3:
            continue
        rows = order[a:b]
        for j in cols:
            out.X[rows, j] = interpolate_patient_series(secs[rows], out.X[rows, j])
    return out


def sparse_column_mask(X, threshold: float = 0.9) -> np.ndarray:
    """True for columns whose missing fraction is below ``threshold``."""
    frac = np.isnan(np.asarray(X, dtype=np.float64)).mean(axis=0)
    return frac < threshold


def mice_impute(X, iterations: int = 10, seed: int = 0) -> np.ndarray:
    """Chained-equation imputation with least-squares column models.

    Missing cells start at their column means.  Each sweep visits the
    incomplete columns in ascending missing-rate order, fits the column on
    all other columns (plus intercept) over the rows where it was observed,
    and overwrites its missing cells with the predictions.  The procedure
    draws no random numbers, so ``seed`` does not change the result.
    """
    X = np.asarray(X, dtype=np.float64)
    miss = np.isnan(X)
    if not miss.any():
        return X.copy()
    n_obs = (~miss).sum(axis=0)
    if (n_obs == 0).any():
        bad = np.flatnonzero(n_obs == 0).tolist()
        raise ValueError(f"mice_impute: columns {bad} have no observed values")
    out = X.copy()
    means = np.nanmean(X, axis=0)
    out[miss] = np.take(means, np.nonzero(miss)[1])
    rate = miss.mean(axis=0)
    cols = [j for j in np.argsort(rate, kind="stable") if rate[j] > 0]
    p = X.shape[1]
    for _ in range(iterations):
        for j in cols:
            others = [k for k in range(p) if k != j]
            design = np.column_stack([np.ones(X.shape[0]), out[:, others]])
            obs = ~miss[:, j]
            coef, *_ = np.linalg.lstsq(design[obs], X[obs, j], rcond=None)
            out[miss[:, j], j] = design[miss[:, j]] @ coef
    return out


def encode_diastolic(label) -> float:
    """Map a diastolic-function label to its ordinal code (NaN when missing)."""
    if label is None:
        return np.nan
    if isinstance(label, float) and np.isnan(label):
        return np.nan
    key = str(label).strip().lower()
    if key in DIASTOLIC_MISSING:
        return np.nan
    if key in DIASTOLIC_CODES:
        return DIASTOLIC_CODES[key]
    try:
        v = float(key)
    except ValueError:
        raise ValueError(f"unrecognized diastolic function label {label!r}") from None
    if v in DIASTOLIC_CLASSES:
        return v
    raise ValueError(f"unrecognized diastolic function code {label!r}")


def impute_ordinal(X, target: int, classes=DIASTOLIC_CLASSES) -> np.ndarray:
    """Fill missing entries of column ``target`` with a one-vs-all logistic classifier.

    Every other column must already be complete.
    """
    from sklearn.linear_model import LogisticRegression
    from sklearn.multiclass import OneVsRestClassifier
    from sklearn.pipeline import make_pipeline
    from sklearn.preprocessing import StandardScaler

    X = np.asarray(X, dtype=np.float64)
    out = X.copy()
    y = X[:, target]
    miss = np.isnan(y)
    if not miss.any():
        return out
    feats = np.delete(X, target, axis=1)
    if np.isnan(feats).any():
        raise ValueError("impute_ordinal: predictor columns must be complete")
    known = np.unique(y[~miss])
    if known.size < 2:
        raise ValueError("impute_ordinal: need at least two classes among known rows")
    if not np.isin(known, classes).all():
        raise ValueError(f"impute_ordinal: unexpected codes {sorted(set(known) - set(classes))}")
    clf = make_pipeline(StandardScaler(), OneVsRestClassifier(LogisticRegression(C=10.0, max_iter=2000)))
    clf.fit(feats[~miss], y[~miss])
    out[miss, target] = clf.predict(feats[miss])
    return out


def impute_diastolic(cohort: Cohort) -> Cohort:
    """Impute every ordinal column from the remaining (completed) columns."""
    out = cohort.copy()
    for j, s in enumerate(cohort.specs):
        if s.kind == "ordinal" and np.isnan(out.X[:, j]).any():
            out.X = impute_ordinal(out.X, j)
    return out


@dataclass
class NormStats:
    """Training-set min/max per feature."""

    mins: dict[str, float]
    maxs: dict[str, float]

    def to_dict(self):
        return {name: [self.mins[name], self.maxs[name]] for name in self.mins}

    @classmethod
    def from_dict(cls, d):
        return cls({k: float(v[0]) for k, v in d.items()}, {k: float(v[1]) for k, v in d.items()})


def minmax_fit(X, names) -> NormStats:
    X = np.asarray(X, dtype=np.float64)
    mins = np.nanmin(X, axis=0)
    maxs = np.nanmax(X, axis=0)
    return NormStats({n: float(a) for n, a in zip(names, mins)}, {n: float(b) for n, b in zip(names, maxs)})


def minmax_apply_column(x, lo: float, hi: float, name: str = "") -> np.ndarray:
    """``2 (x - lo) / (hi - lo) - 1``; constant features map to 0."""
    x = np.asarray(x, dtype=np.float64)
    if hi == lo:
        warnings.warn(f"constant feature {name!r} normalised to 0", RuntimeWarning)
        return np.zeros_like(x)
    return 2.0 * (x - lo) / (hi - lo) - 1.0


def minmax_invert_column(x, lo: float, hi: float) -> np.ndarray:
    return (np.asarray(x, dtype=np.float64) + 1.0) * (hi - lo) / 2.0 + lo


def minmax_apply(X, names, stats: NormStats) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    return np.column_stack(
        [minmax_apply_column(X[:, j], stats.mins[n], stats.maxs[n], n) for j, n in enumerate(names)]
    ) if len(names) else X.copy()


@dataclass
class Split:
    train: np.ndarray
    validation: np.ndarray
    test: np.ndarray


def split_cohort(labels, seed: int, test_frac: float = 0.2, val_frac: float = 0.1) -> Split:
    """Stratified test split, class-balanced validation split, remainder for training."""
    y = np.asarray(labels)
    rng = np.random.default_rng(seed)
    pos = rng.permutation(np.flatnonzero(y == 1))
    neg = rng.permutation(np.flatnonzero(y == 0))
    n_test_pos = int(round(test_frac * pos.size))
    n_test_neg = int(round(test_frac * neg.size))
    test = np.concatenate([pos[:n_test_pos], neg[:n_test_neg]])
    pos, neg = pos[n_test_pos:], neg[n_test_neg:]
    n_val = int(round(val_frac * (pos.size + neg.size)))
    n_val_pos = n_val // 2
    n_val_neg = n_val - n_val_pos
    if n_val_pos < 1 or n_val_pos >= pos.size or n_val_neg >= neg.size:
        raise ValueError(
            f"split_cohort: {pos.size} positive / {neg.size} negative rows left after the test split "
            f"cannot supply a balanced validation set of {n_val}"
        )
    validation = np.concatenate([pos[:n_val_pos], neg[:n_val_neg]])
    train = np.concatenate([pos[n_val_pos:], neg[n_val_neg:]])
    if test.size == 0:
        raise ValueError("split_cohort: empty test split")
    return Split(np.sort(train), np.sort(validation), np.sort(test))


@dataclass
class PrepReport:
    """Cells changed by each stage, in pipeline order."""

    stages: dict[str, int]
    dropped_columns: list[str]
    rows: int
    missing_after: int

    @property
    def total_changed(self) -> int:
        return int(sum(self.stages.values()))

    def to_dict(self):
        return {"stages": self.stages, "total_changed": self.total_changed,
                "dropped_columns": self.dropped_columns, "rows": self.rows, "missing_after": self.missing_after}


def _changed(a: np.ndarray, b: np.ndarray) -> int:
    same = (a == b) | (np.isnan(a) & np.isnan(b))
    return int((~same).sum())


def prep_cohort(cohort: Cohort, sparse_threshold: float = 0.9, mice_iterations: int = 10):
    """clean -> interpolate -> drop sparse columns -> MICE -> ordinal imputation.

    MICE covers the continuous and binary columns (binary fills are rounded
    to 0/1); ordinal columns are then filled by a classifier on the rest.
    Returns ``(prepared cohort, PrepReport)``.
    """
    stages = {}
    cur = cohort.copy()
    before = cur.X.copy()
    for j, s in enumerate(cur.specs):
        if s.kind == "continuous":
            cur.X[:, j] = clean_outliers(cur.X[:, j], s)
    stages["clean_outliers"] = _changed(before, cur.X)

    before = cur.X.copy()
    cur = interpolate_cohort(cur)
    stages["interpolate"] = _changed(before, cur.X)

    keep = sparse_column_mask(cur.X, sparse_threshold)
    dropped = [s.name for s, k in zip(cur.specs, keep) if not k]
    if dropped:
        log.info("dropping sparse columns: %s", dropped)
    cur = cur.select_features(np.flatnonzero(keep))

    before = cur.X.copy()
    cols = [j for j, s in enumerate(cur.specs) if s.kind != "ordinal"]
    if cols and np.isnan(cur.X[:, cols]).any():
        filled = mice_impute(cur.X[:, cols], mice_iterations)
        for k, j in enumerate(cols):
            if cur.specs[j].kind == "binary":
                filled[:, k] = np.clip(np.round(filled[:, k]), 0, 1)
        cur.X[:, cols] = filled
    stages["mice"] = _changed(before, cur.X)

    before = cur.X.copy()
    cur = impute_diastolic(cur)
    stages["ordinal"] = _changed(before, cur.X)
    return cur, PrepReport(stages, dropped, len(cur), int(np.isnan(cur.X).sum()))
