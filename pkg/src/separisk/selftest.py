"""Fast internal consistency checks behind ``separisk selftest``."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .additive_model import AdditiveRiskModel, TrainConfig, fit_config
from .eval_stats import auc
from .nn_core import LSTM, BatchNorm, Conv2D, Dense, MaxPool, ReLU, grad_check
from .synth import gen_tabular, hierarchy_spec
from .video_branch import DESK_CONFIG, VideoNet, build_video_net, network_grad_check

EXPECTED_TRAINABLE = 4237
EXPECTED_NON_TRAINABLE = 56


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name}: {self.detail}"


def check_param_counts() -> CheckResult:
    counts = build_video_net(seed=0).param_count()
    ok = counts["trainable"] == EXPECTED_TRAINABLE and counts["non_trainable"] == EXPECTED_NON_TRAINABLE
    return CheckResult("video net parameter counts", ok,
                       f"{counts['trainable']} trainable / {counts['non_trainable']} non-trainable")


def _layer_error(layer, x, rng, training=True) -> float:
    bn = isinstance(layer, BatchNorm)

    def fwd():
        return layer.forward(x, training=training, update_stats=False) if bn else layer.forward(x, training=training)

    out = fwd()
    proj = rng.standard_normal(out.shape)
    fwd()
    dx = layer.backward(proj)
    arrays = dict(layer.params, input=x)
    grads = dict(layer.grads, input=dx)
    return grad_check(lambda: float((fwd() * proj).sum()), arrays, grads)


def check_layer_gradients(seeds=range(3), tol: float = 1e-4) -> CheckResult:
    worst = 0.0
    for s in seeds:
        rng = np.random.default_rng(s)
        cases = [
            (Conv2D(2, 3, rng=rng), rng.standard_normal((2, 2, 5, 6))),
            (ReLU(), rng.standard_normal((3, 7)) + 0.05),
            (BatchNorm(3), rng.standard_normal((4, 3, 3, 3))),
            (MaxPool(), rng.standard_normal((2, 2, 7, 8))),
            (LSTM(3, 4, rng=rng), rng.standard_normal((2, 5, 3))),
            (Dense(4, 3, "relu", rng=rng), rng.standard_normal((5, 4))),
            (Dense(4, 1, "none", rng=rng), rng.standard_normal((5, 4))),
        ]
        for layer, x in cases:
            worst = max(worst, _layer_error(layer, x, rng))
    return CheckResult("layer gradient checks", worst < tol, f"max relative error {worst:.2e}")


def generic_desk_net(seed: int) -> VideoNet:
    """Desk-scale net with small random biases, so no unit sits exactly on a ReLU kink."""
    rng = np.random.default_rng(seed)
    net = build_video_net(DESK_CONFIG, seed=seed)
    for name, p in net.params().items():
        if name.endswith("bias"):
            p += rng.normal(0.0, 0.05, p.shape)
    return net


def check_network_gradient(seed: int = 0, probes: int = 1, tol: float = 1e-4) -> CheckResult:
    rng = np.random.default_rng(seed + 1)
    net = generic_desk_net(seed)
    clips = rng.uniform(size=(2, DESK_CONFIG.frames, DESK_CONFIG.height, DESK_CONFIG.width))
    err, _ = network_grad_check(net, clips, np.array([0, 1]), probes=probes, rng=rng)
    return CheckResult("desk-scale network gradient", err < tol, f"max relative error {err:.2e}")


def _pair_auc(s, y) -> float:
    pos, neg = s[y == 1], s[y == 0]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p, n in itertools.product(pos, neg))
    return wins / (pos.size * neg.size)


def check_auc_oracle(instances: int = 50) -> CheckResult:
    rng = np.random.default_rng(0)
    bad = 0
    for _ in range(instances):
        n = int(rng.integers(2, 60))
        y = rng.integers(0, 2, n)
        y[:2] = [0, 1]
        s = rng.integers(0, 8, n).astype(float)
        if auc(s, y) != _pair_auc(s, y):
            bad += 1
    return CheckResult("AUC equals pair counting", bad == 0, f"{instances - bad}/{instances} instances agree")


def _small_model() -> tuple[AdditiveRiskModel, object]:
    sc = gen_tabular(hierarchy_spec(), 600, 0)
    tr, va = sc.cohort.subset(np.arange(500)), sc.cohort.subset(np.arange(500, 600))
    model, _ = fit_config("cd+edm", tr, va, TrainConfig(max_epochs=5, patience=2, batch_size=64))
    return model, sc.cohort


def check_separability() -> CheckResult:
    model, cohort = _small_model()
    parts = model.contributions(cohort)
    err = float(np.abs(sum(parts.values()) + model.bias - model.logodds(cohort)).max())
    return CheckResult("separable log-odds", err <= 1e-12, f"max |sum of branches - log-odds| {err:.1e}")


def check_model_roundtrip() -> CheckResult:
    model, _ = _small_model()
    text = model.dumps()
    again = AdditiveRiskModel.loads(text).dumps()
    ok = text == again and model.fusion_weights().min() >= 0
    return CheckResult("model file round trip", ok, "save/load/save byte-identical" if ok else "files differ")


CHECKS: list[Callable[[], CheckResult]] = [
    check_param_counts,
    check_layer_gradients,
    check_network_gradient,
    check_auc_oracle,
    check_separability,
    check_model_roundtrip,
]


def run_selftest() -> list[CheckResult]:
    out = []
    for chk in CHECKS:
        try:
            out.append(chk())
        except Exception as exc:  # a crash is a failed check, not a crashed report
            out.append(CheckResult(chk.__name__, False, f"raised {type(exc).__name__}: {exc}"))
    return out
