"""Separable additive risk models with non-negative fusion weights.

Each continuous (or ordinal) feature gets a polynomial branch
``w * sum_d a_d x**d`` on its min/max-normalised value, binary features
enter linearly with an unconstrained weight, an optional video score
enters as ``w_V * z``, and a single bias completes the log-odds.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .cohort import Cohort, FeatureSpec, atomic_write_text
from .nn_core import RMSProp, sigmoid, weighted_bce_logits, balanced_class_weights
from .tabular_prep import NormStats, minmax_apply_column, minmax_fit

FORMAT_VERSION = "separisk-additive/1"

# model configuration name -> modalities it consumes
MODEL_CONFIGS = {
    "cd": ("cd",),
    "edm": ("edm",),
    "cd+edm": ("cd", "edm"),
    "all": ("cd", "edm", "video"),
}


class ModelFileError(ValueError):
    """Raised when a model file cannot be parsed or violates its invariants."""


def poly_features(x, degree: int) -> np.ndarray:
    """``[x, x**2, ..., x**degree]`` along a new trailing axis."""
    if degree < 1:
        raise ValueError("polynomial degree must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    return np.stack([x**d for d in range(1, degree + 1)], axis=-1)


@dataclass
class PolyBranch:
    feature: str
    coeffs: np.ndarray
    weight: float
    modality: str = "cd"

    @property
    def degree(self) -> int:
        return len(self.coeffs)


@dataclass
class BinaryBranch:
    feature: str
    weight: float
    modality: str = "cd"


def branch_logodds(branch: PolyBranch, x):
    """Contribution ``w * p(x)`` of one branch at normalised value(s) ``x``."""
    return branch.weight * (poly_features(x, branch.degree) @ np.asarray(branch.coeffs))


@dataclass
class TrainConfig:
    max_epochs: int = 200
    patience: int = 10
    batch_size: int = 256
    degree: int = 3
    seed: int = 0
    learning_rate: float = 0.001
    constrained: bool = True
    # "reflect": a negative branch weight flips the sign of (w, a), which
    # leaves w * p(x) unchanged; "clip": w <- max(w, 0)
    sign_mode: str = "reflect"

    def __post_init__(self):
        if self.sign_mode not in ("reflect", "clip"):
            raise ValueError(f"unknown sign_mode {self.sign_mode!r}")
        if self.max_epochs > 0 and not self.patience < self.max_epochs:
            raise ValueError("patience must be smaller than max_epochs")
        if self.degree < 1:
            raise ValueError("polynomial degree must be >= 1")


@dataclass
class AdditiveRiskModel:
    name: str
    modalities: tuple[str, ...]
    specs: list[FeatureSpec]
    poly: list[PolyBranch]
    binary: list[BinaryBranch]
    bias: float
    norm_stats: NormStats
    degree: int
    video_weight: float | None = None
    constrained: bool = True
    meta: dict = field(default_factory=dict)

    @property
    def uses_video(self) -> bool:
        return "video" in self.modalities

    @property
    def feature_names(self) -> list[str]:
        return [s.name for s in self.specs]

    def fusion_weights(self) -> np.ndarray:
        w = [b.weight for b in self.poly]
        if self.video_weight is not None:
            w.append(self.video_weight)
        return np.array(w, dtype=np.float64)

    def branch(self, feature: str):
        for b in self.poly:
            if b.feature == feature:
                return b
        for b in self.binary:
            if b.feature == feature:
                return b
        raise KeyError(f"feature {feature!r} not in model {self.name!r}")

    # -- evaluation -------------------------------------------------------

    def normalize(self, feature: str, x):
        return minmax_apply_column(x, self.norm_stats.mins[feature], self.norm_stats.maxs[feature], feature)

    def _inputs(self, data):
        """Raw feature matrix in model order from a Cohort, dict, or array."""
        if isinstance(data, Cohort):
            cols = [data.index(n) for n in self.feature_names]
            return data.X[:, cols]
        if isinstance(data, dict):
            return np.array([[float(data[n]) for n in self.feature_names]])
        X = np.asarray(data, dtype=np.float64)
        return X[None] if X.ndim == 1 else X

    def contributions(self, data, video_scores=None) -> dict[str, np.ndarray]:
        """Per-branch log-odds terms (polynomial, binary, video), keyed by feature."""
        X = self._inputs(data)
        if np.isnan(X).any():
            bad = [n for j, n in enumerate(self.feature_names) if np.isnan(X[:, j]).any()]
            raise ValueError(f"missing values in model features {bad}; impute first")
        col = {n: j for j, n in enumerate(self.feature_names)}
        out = {}
        for b in self.poly:
            out[b.feature] = branch_logodds(b, self.normalize(b.feature, X[:, col[b.feature]]))
        for b in self.binary:
            out[b.feature] = b.weight * X[:, col[b.feature]]
        if self.uses_video:
            if video_scores is None:
                raise ValueError(f"model {self.name!r} needs video scores")
            out["video"] = self.video_weight * np.asarray(video_scores, dtype=np.float64).reshape(-1)
        return out

    def logodds(self, data, video_scores=None) -> np.ndarray:
        contrib = self.contributions(data, video_scores)
        total = np.full(self._inputs(data).shape[0], self.bias)
        for v in contrib.values():
            total = total + v
        return total

    def predict_risk(self, data, video_scores=None) -> np.ndarray:
        return sigmoid(self.logodds(data, video_scores))

    # -- persistence ------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "format": FORMAT_VERSION,
            "name": self.name,
            "modalities": list(self.modalities),
            "degree": self.degree,
            "constrained": self.constrained,
            "features": [s.to_dict() for s in self.specs],
            "norm_stats": self.norm_stats.to_dict(),
            "poly_branches": [
                {"feature": b.feature, "modality": b.modality, "weight": float(b.weight),
                 "coeffs": [float(c) for c in b.coeffs]}
                for b in self.poly
            ],
            "binary_branches": [
                {"feature": b.feature, "modality": b.modality, "weight": float(b.weight)} for b in self.binary
            ],
            "video_weight": None if self.video_weight is None else float(self.video_weight),
            "bias": float(self.bias),
            "meta": self.meta,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d) -> "AdditiveRiskModel":
        try:
            if d.get("format") != FORMAT_VERSION:
                raise ModelFileError(f"unsupported model format {d.get('format')!r}")
            specs = [FeatureSpec.from_dict(s) for s in d["features"]]
            model = cls(
                name=d["name"],
                modalities=tuple(d["modalities"]),
                specs=specs,
                poly=[PolyBranch(b["feature"], np.array(b["coeffs"], dtype=np.float64), float(b["weight"]),
                                 b["modality"]) for b in d["poly_branches"]],
                binary=[BinaryBranch(b["feature"], float(b["weight"]), b["modality"]) for b in d["binary_branches"]],
                bias=float(d["bias"]),
                norm_stats=NormStats.from_dict(d["norm_stats"]),
                degree=int(d["degree"]),
                video_weight=None if d["video_weight"] is None else float(d["video_weight"]),
                constrained=bool(d["constrained"]),
                meta=d.get("meta", {}),
            )
        except ModelFileError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise ModelFileError(f"malformed model document: {exc!r}") from exc
        if model.constrained and (model.fusion_weights() < 0).any():
            raise ModelFileError("model file holds a negative fusion weight")
        names = set(model.feature_names)
        if any(b.feature not in names for b in model.poly + model.binary):
            raise ModelFileError("branch refers to an undeclared feature")
        if any(b.feature not in model.norm_stats.mins for b in model.poly):
            raise ModelFileError("normalisation stats missing for a polynomial branch")
        return model

    @classmethod
    def loads(cls, text: str) -> "AdditiveRiskModel":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ModelFileError(f"model file is not valid JSON: {exc}") from exc
        if not isinstance(d, dict):
            raise ModelFileError("model file must hold a JSON object")
        return cls.from_dict(d)

    def save(self, path) -> None:
        atomic_write_text(path, self.dumps())

    @classmethod
    def load(cls, path) -> "AdditiveRiskModel":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except UnicodeDecodeError as exc:
            raise ModelFileError(f"{path}: not UTF-8 text") from exc
        try:
            return cls.loads(text)
        except ModelFileError as exc:
            raise ModelFileError(f"{path}: {exc}") from None


def model_logodds(model: AdditiveRiskModel, sample, video_score=None) -> float:
    """Log-odds of a single sample given as a ``{feature: value}`` mapping."""
    vs = None if video_score is None else np.array([video_score], dtype=np.float64)
    return float(model.logodds(sample, vs)[0])


def predict_risk(model: AdditiveRiskModel, sample, video_score=None) -> float:
    return float(sigmoid(np.array([model_logodds(model, sample, video_score)]))[0])


def features_for(cohort: Cohort, modalities) -> list[FeatureSpec]:
    return [s for s in cohort.specs if s.modality in modalities]


def init_model(name: str, cohort: Cohort, modalities, config: TrainConfig,
               rng: np.random.Generator | None = None) -> AdditiveRiskModel:
    """Untrained model whose normalisation stats come from ``cohort`` (training rows)."""
    rng = np.random.default_rng(config.seed) if rng is None else rng
    specs = features_for(cohort, modalities)
    poly_specs = [s for s in specs if s.kind != "binary"]
    cols = [cohort.index(s.name) for s in poly_specs]
    stats = minmax_fit(cohort.X[:, cols], [s.name for s in poly_specs]) if cols else NormStats({}, {})
    poly = []
    for s in poly_specs:
        a = rng.uniform(-0.1, 0.1, size=config.degree)
        a /= np.linalg.norm(a)
        poly.append(PolyBranch(s.name, a, 0.1, s.modality))
    binary = [BinaryBranch(s.name, 0.0, s.modality) for s in specs if s.kind == "binary"]
    prev = float(np.clip(cohort.labels.mean(), 1e-6, 1 - 1e-6)) if len(cohort) else 0.5
    return AdditiveRiskModel(
        name=name,
        modalities=tuple(modalities),
        specs=specs,
        poly=poly,
        binary=binary,
        bias=float(np.log(prev / (1 - prev))),
        norm_stats=stats,
        degree=config.degree,
        video_weight=0.1 if "video" in modalities else None,
        constrained=config.constrained,
    )


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    best_epoch: int = -1
    steps: int = 0
    min_fusion_weight: float = float("inf")

    def to_dict(self):
        return {"train_loss": self.train_loss, "val_loss": self.val_loss, "best_epoch": self.best_epoch,
                "steps": self.steps}


class _Design:
    """Pre-expanded inputs of one data split for fast repeated evaluation."""

    def __init__(self, model: AdditiveRiskModel, cohort: Cohort, video_scores):
        X = model._inputs(cohort)
        if np.isnan(X).any():
            raise ValueError("training data contains missing values; impute first")
        col = {n: j for j, n in enumerate(model.feature_names)}
        self.phi = np.stack(
            [poly_features(model.normalize(b.feature, X[:, col[b.feature]]), model.degree) for b in model.poly],
            axis=1,
        ) if model.poly else np.zeros((len(cohort), 0, model.degree))
        self.xb = np.column_stack([X[:, col[b.feature]] for b in model.binary]) if model.binary \
            else np.zeros((len(cohort), 0))
        if model.uses_video:
            if video_scores is None:
                raise ValueError(f"model {model.name!r} needs video scores")
            self.z = np.asarray(video_scores, dtype=np.float64).reshape(-1)
        else:
            self.z = np.zeros(len(cohort))
        self.y = cohort.labels.astype(np.float64)

    def rows(self, idx):
        d = object.__new__(_Design)
        d.phi, d.xb, d.z, d.y = self.phi[idx], self.xb[idx], self.z[idx], self.y[idx]
        return d


def _logits(p, d: _Design):
    per_branch = np.einsum("nfd,fd->nf", d.phi, p["A"])
    return per_branch @ p["w"] + d.xb @ p["wb"] + p["wv"][0] * d.z + p["b"][0], per_branch


def _project(p, constrained: bool, sign_mode: str = "reflect"):
    norms = np.linalg.norm(p["A"], axis=1)
    ok = norms > 0
    p["w"][ok] *= norms[ok]
    p["A"][ok] /= norms[ok, None]
    if constrained:
        if sign_mode == "reflect":
            neg = p["w"] < 0
            p["w"][neg] = -p["w"][neg]
            p["A"][neg] = -p["A"][neg]
        else:
            np.maximum(p["w"], 0.0, out=p["w"])
        np.maximum(p["wv"], 0.0, out=p["wv"])


def _to_params(model: AdditiveRiskModel):
    deg = model.degree
    return {
        "A": np.array([b.coeffs for b in model.poly], dtype=np.float64).reshape(len(model.poly), deg),
        "w": np.array([b.weight for b in model.poly], dtype=np.float64),
        "wb": np.array([b.weight for b in model.binary], dtype=np.float64),
        "wv": np.array([model.video_weight or 0.0]),
        "b": np.array([model.bias]),
    }


def _from_params(model: AdditiveRiskModel, p) -> AdditiveRiskModel:
    poly = [PolyBranch(b.feature, p["A"][i].copy(), float(p["w"][i]), b.modality) for i, b in enumerate(model.poly)]
    binary = [BinaryBranch(b.feature, float(p["wb"][i]), b.modality) for i, b in enumerate(model.binary)]
    return AdditiveRiskModel(model.name, model.modalities, list(model.specs), poly, binary, float(p["b"][0]),
                             model.norm_stats, model.degree,
                             float(p["wv"][0]) if model.uses_video else None, model.constrained, dict(model.meta))


def train(
    model: AdditiveRiskModel,
    train_data: Cohort,
    val_data: Cohort,
    config: TrainConfig,
    train_video=None,
    val_video=None,
    on_step: Callable[[AdditiveRiskModel, dict], None] | None = None,
) -> tuple[AdditiveRiskModel, TrainHistory]:
    """Fit with class-weighted BCE, RMSProp and validation early stopping.

    After every optimizer step each branch's coefficient norm is folded into
    its fusion weight and negative weights are removed according to
    ``config.sign_mode``; the video weight is always clipped at zero.  Returns the
    parameters from the epoch with the lowest validation loss.
    """
    if len(train_data) == 0:
        raise ValueError("empty training set")
    if np.unique(train_data.labels).size < 2:
        raise ValueError("training labels contain a single class")
    rng = np.random.default_rng(config.seed)
    dtr = _Design(model, train_data, train_video)
    dval = _Design(model, val_data, val_video)
    cw = balanced_class_weights(train_data.labels)
    cw_val = balanced_class_weights(val_data.labels)
    p = _to_params(model)
    if not model.uses_video:
        p["wv"][0] = 0.0
    opt = RMSProp(learning_rate=config.learning_rate)
    hist = TrainHistory()
    best = {k: v.copy() for k, v in p.items()}
    best_val = np.inf
    wait = 0
    n = len(train_data)
    for epoch in range(config.max_epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            d = dtr.rows(order[start : start + config.batch_size])
            z, per_branch = _logits(p, d)
            sw = np.where(d.y == 1, cw[1], cw[0])
            g = sw * (sigmoid(z) - d.y) / sw.sum()
            grads = {
                "A": p["w"][:, None] * np.einsum("n,nfd->fd", g, d.phi),
                "w": g @ per_branch,
                "wb": g @ d.xb,
                "wv": np.array([g @ d.z]) if model.uses_video else np.zeros(1),
                "b": np.array([g.sum()]),
            }
            opt.step(p, grads)
            _project(p, config.constrained, config.sign_mode)
            hist.steps += 1
            fw = p["w"] if not model.uses_video else np.r_[p["w"], p["wv"]]
            if fw.size:
                hist.min_fusion_weight = min(hist.min_fusion_weight, float(fw.min()))
            if on_step is not None:
                on_step(model, p)
        tr_loss, _ = weighted_bce_logits(_logits(p, dtr)[0], dtr.y, cw)
        val_loss, _ = weighted_bce_logits(_logits(p, dval)[0], dval.y, cw_val)
        hist.train_loss.append(tr_loss)
        hist.val_loss.append(val_loss)
        if val_loss < best_val:
            best_val = val_loss
            best = {k: v.copy() for k, v in p.items()}
            hist.best_epoch = epoch
            wait = 0
        else:
            wait += 1
            if wait >= config.patience:
                break
    return _from_params(model, best), hist


def fit_config(name: str, train_data: Cohort, val_data: Cohort, config: TrainConfig,
               train_video=None, val_video=None, modalities=None):
    """Initialise and train one named model configuration."""
    mods = MODEL_CONFIGS[name] if modalities is None else tuple(modalities)
    model = init_model(name, train_data, mods, config)
    return train(model, train_data, val_data, config, train_video, val_video)


def fuse_hierarchy(train_data: Cohort, val_data: Cohort, config: TrainConfig,
                   train_video=None, val_video=None, names=("cd", "edm", "cd+edm", "all")):
    """Independently trained models for each modality subset in ``names``.

    The ``all`` model needs video scores (the video network's pre-sigmoid
    output) for both splits.
    """
    out = {}
    for name in names:
        mods = MODEL_CONFIGS[name]
        vt, vv = (train_video, val_video) if "video" in mods else (None, None)
        out[name] = fit_config(name, train_data, val_data, config, vt, vv)
    return out
