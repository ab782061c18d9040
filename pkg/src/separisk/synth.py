"""Synthetic cohorts and clips with known ground truth."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cohort import Cohort, FeatureSpec
from .eval_stats import auc
from .nn_core import sigmoid

EFFECTS = ("linear", "quadratic", "monotone-cubic", "null", "sigmoid")


@dataclass(frozen=True)
class SynthFeature:
    """One generated feature.

    The effect is a function of the standardised draw ``u`` (uniform on
    [-1, 1] or standard normal); the stored value is ``loc + scale * u``.
    """

    name: str
    effect: str = "null"
    strength: float = 1.0
    distribution: str = "uniform"
    modality: str = "cd"
    kind: str = "continuous"
    loc: float = 0.0
    scale: float = 1.0

    def __post_init__(self):
        if self.effect not in EFFECTS:
            raise ValueError(f"unknown effect {self.effect!r}")
        if self.distribution not in ("uniform", "gaussian"):
            raise ValueError(f"unknown distribution {self.distribution!r}")

    def true_effect(self, u):
        u = np.asarray(u, dtype=np.float64)
        b = self.strength
        if self.kind == "binary":
            return b * u if self.effect != "null" else np.zeros_like(u)
        if self.effect == "linear":
            return b * u
        if self.effect == "quadratic":
            return b * u**2
        if self.effect == "monotone-cubic":
            return b * (u**3 + 0.5 * u)
        if self.effect == "sigmoid":
            return b * np.tanh(3 * u)
        return np.zeros_like(u)

    def effect_of_value(self, x):
        """True log-odds contribution at stored (original-unit) values."""
        return self.true_effect((np.asarray(x, dtype=np.float64) - self.loc) / self.scale)


@dataclass
class GeneratorSpec:
    features: list[SynthFeature]
    bias: float = 0.0
    n_patients: int | None = None

    def true_logodds(self, U):
        return sum(f.true_effect(U[:, j]) for j, f in enumerate(self.features)) + self.bias


@dataclass
class SynthCohort:
    cohort: Cohort
    true_prob: np.ndarray
    spec: GeneratorSpec = field(repr=False)


def gen_tabular(spec: GeneratorSpec, n: int, seed: int) -> SynthCohort:
    """Sample ``n`` rows; labels are Bernoulli(sigmoid(true log-odds))."""
    if n < 1:
        raise ValueError("gen_tabular needs n >= 1")
    rng = np.random.default_rng(seed)
    U = np.empty((n, len(spec.features)))
    for j, f in enumerate(spec.features):
        if f.kind == "binary":
            U[:, j] = rng.integers(0, 2, size=n)
        elif f.distribution == "uniform":
            U[:, j] = rng.uniform(-1.0, 1.0, size=n)
        else:
            U[:, j] = rng.standard_normal(n)
    p = sigmoid(spec.true_logodds(U))
    y = (rng.uniform(size=n) < p).astype(np.int64)
    X = np.column_stack([U[:, j] if f.kind == "binary" else f.loc + f.scale * U[:, j]
                         for j, f in enumerate(spec.features)]) if spec.features else np.empty((n, 0))
    n_pat = spec.n_patients or n
    pid = np.array([f"P{k:06d}" for k in rng.integers(0, n_pat, size=n)] if n_pat < n
                   else [f"P{k:06d}" for k in range(n)], dtype=object)
    days = rng.integers(0, 365 * 15, size=n)
    times = np.datetime64("2003-01-01T00:00:00", "s") + days.astype("timedelta64[D]").astype("timedelta64[s]")
    specs = [FeatureSpec(f.name, f.kind, f.modality) for f in spec.features]
    return SynthCohort(Cohort(specs, X, y, pid, times), p, spec)


def oracle_auc(true_prob, labels) -> float:
    """AUC of the generating probabilities against the realised labels."""
    return auc(true_prob, labels)


def recovery_spec(strength: float = 1.5) -> GeneratorSpec:
    """8 signal-carrying and 8 null clinical features in assorted units."""
    effects = [
        ("linear", 1.0), ("linear", -1.0), ("quadratic", 1.0), ("quadratic", -1.0),
        ("monotone-cubic", 1.0), ("monotone-cubic", -1.0), ("linear", 0.8), ("quadratic", 1.2),
    ]
    feats = []
    for k, (eff, sign) in enumerate(effects):
        feats.append(SynthFeature(f"signal_{k}", eff, sign * strength, "uniform", "cd",
                                  loc=50.0 + 10 * k, scale=5.0 + k))
    for k in range(8):
        feats.append(SynthFeature(f"null_{k}", "null", 0.0, "uniform" if k % 2 else "gaussian", "cd",
                                  loc=100.0 - 5 * k, scale=2.0 + k))
    return GeneratorSpec(feats, bias=-1.0)


def hierarchy_spec(edm_strength: float = 1.5) -> GeneratorSpec:
    """Clinical features plus echo-derived features with independent signal."""
    feats = [
        SynthFeature("age", "linear", 1.5, loc=65, scale=15),
        SynthFeature("heart_rate", "quadratic", 1.0, loc=75, scale=15),
        SynthFeature("weight", "monotone-cubic", -0.8, loc=80, scale=20),
        SynthFeature("ldl", "null", 0.0, "gaussian", loc=90, scale=30),
        SynthFeature("smoker", "linear", 0.4, kind="binary"),
        SynthFeature("trmv", "linear", edm_strength, modality="edm", loc=250, scale=50),
        SynthFeature("ejection_fraction", "quadratic", edm_strength, modality="edm", loc=55, scale=15),
        SynthFeature("lvidd", "null", 0.0, "gaussian", modality="edm", loc=4.8, scale=0.6),
    ]
    return GeneratorSpec(feats, bias=-1.5)


def mask_mcar(X, rate: float, seed: int, max_tries: int = 100):
    """Hide each cell independently with probability ``rate``.

    Returns ``(masked, mask)``; resamples if a column would be emptied.
    """
    if not 0 <= rate < 1:
        raise ValueError("mask rate must be in [0, 1)")
    X = np.asarray(X, dtype=np.float64)
    rng = np.random.default_rng(seed)
    for _ in range(max_tries):
        mask = rng.uniform(size=X.shape) < rate
        if X.shape[0] == 0 or not mask.all(axis=0).any():
            out = X.copy()
            out[mask] = np.nan
            return out, mask
    raise ValueError("mask_mcar: could not avoid an all-missing column")


@dataclass
class SynthVideos:
    clips: np.ndarray  # [N, T, H, W]
    labels: np.ndarray
    latent: np.ndarray
    true_prob: np.ndarray


def render_clips(latent, dims=(12, 28, 38), signal_strength: float = 1.0, seed: int = 0,
                 noise: float = 0.05) -> np.ndarray:
    """One moving Gaussian blob per clip; its amplitude tracks ``latent``."""
    t_len, h, w = dims
    latent = np.asarray(latent, dtype=np.float64)
    rng = np.random.default_rng(seed)
    amp = np.clip(0.45 + 0.2 * signal_strength * np.tanh(latent), 0.05, 0.85)
    sigma = 0.12 * min(h, w)
    yy, xx = np.mgrid[0:h, 0:w]
    clips = np.empty((latent.size, t_len, h, w))
    for k in range(latent.size):
        cy0, cx0 = rng.uniform(0.3, 0.7) * h, rng.uniform(0.3, 0.7) * w
        vy, vx = rng.uniform(-0.15, 0.15, 2) * np.array([h, w]) / t_len
        phase = rng.uniform(0, 2 * np.pi)
        for t in range(t_len):
            a = amp[k] * (0.85 + 0.15 * np.sin(2 * np.pi * t / t_len + phase))
            d2 = (yy - cy0 - vy * t) ** 2 + (xx - cx0 - vx * t) ** 2
            clips[k, t] = 0.1 + a * np.exp(-d2 / (2 * sigma**2))
    clips += noise * rng.standard_normal(clips.shape)
    np.clip(clips, 0.0, 1.0, out=clips)
    return clips


def gen_videos(n: int, dims=(12, 28, 38), signal_strength: float = 1.0, seed: int = 0,
               label_temperature: float = 0.25, noise: float = 0.05) -> SynthVideos:
    """Clips whose blob amplitude follows a latent risk ``z ~ N(0, 1)``.

    Amplitude is scaled by ``signal_strength`` and labels are
    Bernoulli(sigmoid(z / temperature)); temperature 0 thresholds ``z`` at 0.
    """
    rng = np.random.default_rng(seed)
    z = rng.standard_normal(n)
    if label_temperature == 0:
        prob = (z > 0).astype(np.float64)
    else:
        prob = sigmoid(z / label_temperature)
    labels = (rng.uniform(size=n) < prob).astype(np.int64)
    clips = render_clips(z, dims, signal_strength, int(rng.integers(2**31)), noise)
    return SynthVideos(clips, labels, z, prob)


def gen_multimodal(spec: GeneratorSpec, n: int, seed: int, video_effect: float = 1.0,
                   dims=(12, 28, 38), signal_strength: float = 1.0):
    """Tabular cohort plus one clip per row.

    A hidden latent ``z ~ N(0, 1)`` adds ``video_effect * z`` to the true
    log-odds and drives the blob amplitude of that row's clip.
    Returns ``(SynthCohort, clips, latent)``.
    """
    rng = np.random.default_rng(seed)
    z = rng.standard_normal(n)
    hidden = SynthFeature("__video_latent__", "linear", video_effect, "gaussian")
    full = GeneratorSpec(list(spec.features) + [hidden], spec.bias, spec.n_patients)
    sc = gen_tabular(full, n, int(rng.integers(2**31)))
    # swap the generator's own draw of the hidden column for z
    U_hidden = sc.cohort.X[:, -1]
    logit = np.log(sc.true_prob / (1 - sc.true_prob)) - video_effect * U_hidden + video_effect * z
    prob = sigmoid(logit)
    y = (np.random.default_rng(int(rng.integers(2**31))).uniform(size=n) < prob).astype(np.int64)
    cohort = sc.cohort.select_features(range(len(spec.features)))
    cohort.labels = y
    clips = render_clips(z, dims, signal_strength, int(rng.integers(2**31)))
    return SynthCohort(cohort, prob, spec), clips, z
