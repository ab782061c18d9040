"""AUC, paired t-tests and the 5-run experiment report."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import betainc
from scipy.stats import rankdata

ALPHA = 0.01 / 5

# Comparisons reported in the experiment table, in display order.
COMPARISONS = [
    ("cd", "edm"),
    ("cd", "video"),
    ("edm", "video"),
    ("cd", "cd+edm"),
    ("cd+edm", "all"),
]

TABLE_ROWS = [("cd", "CD"), ("edm", "EDM"), ("video", "Video"), ("cd+edm", "CD+EDM"), ("all", "All 3")]


def auc(scores, labels) -> float:
    """Area under the ROC curve via the Mann-Whitney rank statistic.

    Tied scores share their average rank, so every positive/negative tie
    counts one half.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    pos = y == 1
    n1 = int(pos.sum())
    n0 = y.size - n1
    if n1 == 0 or n0 == 0:
        raise ValueError("auc needs both classes present")
    ranks = rankdata(s)
    u = ranks[pos].sum() - n1 * (n1 + 1) / 2.0
    return float(u / (n1 * n0))


@dataclass
class ComparisonResult:
    model_a: str
    model_b: str
    t: float
    p: float
    significant: bool

    def to_dict(self):
        t = self.t if math.isfinite(self.t) else ("inf" if self.t > 0 else "-inf")
        return {"model_a": self.model_a, "model_b": self.model_b, "t": t, "p": self.p,
                "significant": self.significant}


def student_t_two_sided_p(t: float, dof: int) -> float:
    if math.isinf(t):
        return 0.0
    return float(betainc(dof / 2.0, 0.5, dof / (dof + t * t)))


def paired_ttest(aucs_a, aucs_b, names=("a", "b"), alpha: float = ALPHA) -> ComparisonResult:
    """Two-sided paired t-test on per-run AUCs (``a - b``)."""
    a = np.asarray(aucs_a, dtype=np.float64)
    b = np.asarray(aucs_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size < 2:
        raise ValueError("paired_ttest needs two equal-length samples with n >= 2")
    d = a - b
    n = d.size
    mean = d.mean()
    sd = d.std(ddof=1)
    if sd == 0.0:
        if mean == 0.0:
            return ComparisonResult(names[0], names[1], 0.0, 1.0, False)
        t = math.copysign(math.inf, mean)
    else:
        t = float(mean / (sd / math.sqrt(n)))
    p = student_t_two_sided_p(t, n - 1)
    return ComparisonResult(names[0], names[1], t, p, p < alpha)


@dataclass
class RunReport:
    run_id: int
    aucs: dict[str, float] = field(default_factory=dict)
    loss_histories: dict[str, dict] = field(default_factory=dict)
    weights: dict[str, dict] = field(default_factory=dict)

    def to_dict(self):
        return {"run_id": self.run_id, "aucs": self.aucs, "loss_histories": self.loss_histories,
                "weights": self.weights}


def compare_runs(reports: list[RunReport], alpha: float = ALPHA) -> list[ComparisonResult]:
    """Paired tests for every available comparison; none with fewer than two runs."""
    if len(reports) < 2:
        return []
    names = set(reports[0].aucs)
    out = []
    for a, b in COMPARISONS:
        if a in names and b in names:
            out.append(paired_ttest([r.aucs[a] for r in reports], [r.aucs[b] for r in reports],
                                    names=(a, b), alpha=alpha))
    return out


def summarize(reports: list[RunReport]) -> dict[str, tuple[float, float]]:
    """Mean and sample sd of test AUC per model configuration."""
    out = {}
    for name in reports[0].aucs:
        v = np.array([r.aucs[name] for r in reports])
        out[name] = (float(v.mean()), float(v.std(ddof=1)) if v.size > 1 else 0.0)
    return out


def render_table(reports: list[RunReport], comparisons: list[ComparisonResult]) -> str:
    """Plain-text table: one row per input set, columns per method."""
    summary = summarize(reports)
    has_lr = any(k.endswith(":lr") for k in summary)
    cols = ["IMNN"] + (["Logistic Regression"] if has_lr else [])
    lines = [f"Model input   {'  '.join(f'{c:<20}' for c in cols)}".rstrip()]
    for key, label in TABLE_ROWS:
        if key not in summary and f"{key}:lr" not in summary:
            continue
        cells = []
        for k in ([key, f"{key}:lr"] if has_lr else [key]):
            if k in summary:
                m, s = summary[k]
                cells.append(f"{m:.2f} ({s:.2f})")
            else:
                cells.append("-")
        lines.append(f"{label:<13} {'  '.join(f'{c:<20}' for c in cells)}".rstrip())
    if comparisons:
        lines.append("")
        lines.append(f"Paired t-tests over {len(reports)} runs (alpha = 0.01/5 = {ALPHA:g}):")
    for c in comparisons:
        mark = "significant" if c.significant else "not significant"
        lines.append(f"  {c.model_a} vs {c.model_b}: t = {c.t:.4f}, p = {c.p:.3g} ({mark})")
    return "\n".join(lines) + "\n"


def metrics_report(reports: list[RunReport], comparisons: list[ComparisonResult]) -> str:
    summary = summarize(reports)
    doc = {
        "runs": [r.to_dict() for r in reports],
        "summary": {k: {"mean_auc": m, "sd_auc": s} for k, (m, s) in summary.items()},
        "comparisons": [c.to_dict() for c in comparisons],
        "alpha": ALPHA,
    }
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"
