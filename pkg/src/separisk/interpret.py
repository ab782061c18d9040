"""Weight rankings, odds-ratio risk curves and class histograms."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .additive_model import AdditiveRiskModel, PolyBranch, branch_logodds
from .cohort import Cohort

MODALITY_TAGS = {"cd": "CD", "edm": "EDM", "video": "Video"}
VIDEO_FEATURE = "video"


@dataclass
class RankEntry:
    feature: str
    weight: float
    modality: str
    kind: str = "poly"


def _as_list(models):
    if isinstance(models, AdditiveRiskModel):
        return [models]
    models = list(models)
    if not models:
        raise ValueError("no models given")
    return models


def model_weights(model: AdditiveRiskModel) -> dict[str, tuple[float, str, str]]:
    """feature -> (ranking weight, modality tag, kind). Binary weights enter by magnitude."""
    out = {}
    for b in model.poly:
        out[b.feature] = (b.weight, MODALITY_TAGS[b.modality], "poly")
    for b in model.binary:
        out[b.feature] = (abs(b.weight), MODALITY_TAGS[b.modality], "binary")
    if model.video_weight is not None:
        out[VIDEO_FEATURE] = (model.video_weight, "Video", "video")
    return out


def rank_features(models) -> list[RankEntry]:
    """Features in descending order of (run-averaged) weight; ties by name."""
    models = _as_list(models)
    if any(not isinstance(m, AdditiveRiskModel) for m in models):
        raise TypeError("rank_features expects fitted AdditiveRiskModel objects")
    per = [model_weights(m) for m in models]
    feats = set(per[0])
    if any(set(p) != feats for p in per):
        raise ValueError("models in a ranking set must share their features")
    entries = []
    for f in feats:
        w = float(np.mean([p[f][0] for p in per]))
        entries.append(RankEntry(f, w, per[0][f][1], per[0][f][2]))
    entries.sort(key=lambda e: (-e.weight, e.feature))
    return entries


def rank_weights(weights: dict[str, float]) -> list[str]:
    """Rank plain ``{feature: weight}`` mappings with the same ordering rule."""
    return [f for f, _ in sorted(weights.items(), key=lambda kv: (-kv[1], kv[0]))]


def ranking_table(sets: dict[str, list[AdditiveRiskModel]]) -> tuple[list[str], list[str], dict]:
    """Feature x configuration table of mean weights.

    Returns ``(row_features, columns, cells)`` with ``cells[(feature, column)]``
    holding the mean weight; rows are ordered by their largest weight.
    """
    columns = list(sets)
    cells = {}
    for col, models in sets.items():
        for e in rank_features(models):
            cells[(e.feature, col)] = e.weight
    feats = sorted({f for f, _ in cells}, key=lambda f: (-max(cells.get((f, c), -np.inf) for c in columns), f))
    return feats, columns, cells


def render_ranking_csv(sets: dict[str, list[AdditiveRiskModel]]) -> str:
    feats, columns, cells = ranking_table(sets)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["feature"] + columns)
    for f in feats:
        w.writerow([f] + [repr(cells[(f, c)]) if (f, c) in cells else "-" for c in columns])
    return buf.getvalue()


@dataclass
class RiskCurve:
    feature: str
    grid: np.ndarray
    logodds: np.ndarray  # [runs, grid]
    odds_factor: np.ndarray  # [runs, grid]
    mean: np.ndarray = field(init=False)
    sd: np.ndarray = field(init=False)
    histograms: "ClassHistograms | None" = None

    def __post_init__(self):
        self.mean = self.odds_factor.mean(axis=0)
        runs = self.odds_factor.shape[0]
        self.sd = self.odds_factor.std(axis=0, ddof=1) if runs > 1 else np.zeros_like(self.mean)

    def rows(self):
        for r in range(self.logodds.shape[0]):
            for g, lo, of in zip(self.grid, self.logodds[r], self.odds_factor[r]):
                yield self.feature, r, g, lo, of


def default_grid(values, points: int = 101, lo_pct: float = 1.0, hi_pct: float = 99.0) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    v = v[~np.isnan(v)]
    lo, hi = np.percentile(v, [lo_pct, hi_pct])
    return np.linspace(lo, hi, points)


def curve_contribution(model: AdditiveRiskModel, feature: str, grid) -> np.ndarray:
    b = model.branch(feature)
    if not isinstance(b, PolyBranch):
        raise ValueError(f"feature {feature!r} is binary; risk curves cover polynomial branches only")
    return branch_logodds(b, model.normalize(feature, grid))


def risk_curve(models, feature: str, grid=None, cohort: Cohort | None = None, bins: int = 30,
               run_ids=None) -> RiskCurve:
    """Odds-ratio factor of one feature per run, relative to its grid minimum.

    ``grid`` is in original units; by default 101 points between the 1st and
    99th percentile of ``cohort``.
    """
    models = _as_list(models)
    if grid is None:
        if cohort is None:
            raise ValueError("need either a grid or a cohort to derive one")
        grid = default_grid(cohort.column(feature))
    grid = np.asarray(grid, dtype=np.float64)
    for m in models:
        if feature not in m.feature_names:
            raise KeyError(f"feature {feature!r} absent from model {m.name!r}")
    lo = np.array([curve_contribution(m, feature, grid) for m in models])
    of = np.exp(lo - lo.min(axis=1, keepdims=True))
    hist = class_histograms(cohort, feature, bins) if cohort is not None else None
    return RiskCurve(feature, grid, lo, of, hist)


@dataclass
class ClassHistograms:
    edges: np.ndarray
    survivor: np.ndarray
    nonsurvivor: np.ndarray


def class_histograms(cohort: Cohort, feature: str, bins=30) -> ClassHistograms:
    """Per-class normalised histograms on shared edges (label 1 = non-survivor)."""
    x = cohort.column(feature)
    ok = ~np.isnan(x)
    x, y = x[ok], cohort.labels[ok]
    if not (y == 0).any() or not (y == 1).any():
        raise ValueError("class_histograms needs both classes present")
    edges = np.histogram_bin_edges(x, bins=bins)
    h0, _ = np.histogram(x[y == 0], bins=edges)
    h1, _ = np.histogram(x[y == 1], bins=edges)
    return ClassHistograms(edges, h0 / h0.sum(), h1 / h1.sum())


def large_change_odds(model: AdditiveRiskModel, feature: str, x: float, dx: float,
                      normalized: bool = False) -> float:
    """``exp(w (p(x + dx) - p(x)))``; inputs in original units unless ``normalized``."""
    b = model.branch(feature)
    if not isinstance(b, PolyBranch):
        return float(np.exp(b.weight * dx))
    pts = np.array([x, x + dx], dtype=np.float64)
    if not normalized:
        pts = model.normalize(feature, pts)
    c = branch_logodds(b, pts)
    return float(np.exp(c[1] - c[0]))


def curves_csv(curves: list[RiskCurve]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["feature", "run_id", "grid_value", "logodds_contribution", "odds_factor"])
    for c in curves:
        for f, r, g, lo, of in c.rows():
            w.writerow([f, r, repr(float(g)), repr(float(lo)), repr(float(of))])
    return buf.getvalue()


def histogram_csv(h: ClassHistograms) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["bin_lo", "bin_hi", "density_survivor", "density_nonsurvivor"])
    for k in range(len(h.survivor)):
        w.writerow([repr(float(h.edges[k])), repr(float(h.edges[k + 1])),
                    repr(float(h.survivor[k])), repr(float(h.nonsurvivor[k]))])
    return buf.getvalue()


def curve_svg(curve: RiskCurve, path, units: str = "") -> None:
    """Risk curve with its mean +/- sd band over the two class histograms."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4, 3))
    if curve.histograms is not None:
        h = curve.histograms
        ax2 = ax.twinx()
        width = np.diff(h.edges)
        ax2.bar(h.edges[:-1], h.survivor, width=width, align="edge", color="#9be29b", alpha=0.5)
        ax2.bar(h.edges[:-1], h.nonsurvivor, width=width, align="edge", color="#ff7043", alpha=0.5)
        ax2.set_yticks([])
        ax.set_zorder(ax2.get_zorder() + 1)
        ax.patch.set_visible(False)
    ax.plot(curve.grid, curve.mean, color="tab:blue")
    ax.fill_between(curve.grid, curve.mean - curve.sd, curve.mean + curve.sd, color="tab:blue", alpha=0.25)
    ax.set_xlabel(f"{curve.feature} ({units})" if units else curve.feature)
    ax.set_ylabel("odds factor")
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
