"""Acceptance suite: one test per criterion, each logging a PASS/FAIL line."""

import itertools
import json
import time

import numpy as np
import pytest
from scipy.stats import spearmanr

from separisk.additive_model import PolyBranch, TrainConfig, fit_config, init_model, model_logodds, train
from separisk.cli import main
from separisk.cohort import Cohort, FeatureSpec
from separisk.eval_stats import ALPHA, auc
from separisk.experiment import ExperimentConfig, run_experiment
from separisk.interpret import rank_features, risk_curve
from separisk.nn_core import sigmoid
from separisk.selftest import check_layer_gradients, generic_desk_net
from separisk.synth import gen_tabular, gen_videos, hierarchy_spec, oracle_auc, recovery_spec
from separisk.tabular_prep import minmax_apply_column, minmax_fit, mice_impute, split_cohort
from separisk.video_branch import DESK_CONFIG, build_video_net, network_grad_check, train_video

pytestmark = pytest.mark.slow

LAYER_ROWS = [40, 148, 16, 296, 584, 32, 584, 584, 32, 584, 584, 32, 544, 208, 20, 5]


def test_architecture_identity(criterion):
    with criterion(1, "architecture identity") as rec:
        t0 = time.perf_counter()
        net = build_video_net()
        counts = net.param_count()
        rows = [tr + nt for _, tr, nt in net.param_table()]
        elapsed = time.perf_counter() - t0
        rec.detail = f"{counts['trainable']} trainable / {counts['non_trainable']} non-trainable"
        assert counts == {"trainable": 4237, "non_trainable": 56}
        assert rows == LAYER_ROWS
        assert elapsed < 1.0


def test_gradient_oracle(criterion):
    with criterion(2, "gradient oracle") as rec:
        t0 = time.perf_counter()
        seeds = range(100)
        layers = check_layer_gradients(seeds)
        names = list(build_video_net(DESK_CONFIG).params())
        worst_net = 0.0
        probed = set()
        for s in seeds:
            # three arrays per seed, rotating so every array is probed repeatedly
            pick = [names[(3 * s + k) % len(names)] for k in range(3)]
            rng = np.random.default_rng(1000 + s)
            clips = rng.uniform(size=(2, DESK_CONFIG.frames, DESK_CONFIG.height, DESK_CONFIG.width))
            err, recs = network_grad_check(generic_desk_net(s), clips, np.array([0, 1]), probes=1,
                                           rng=rng, arrays=pick)
            worst_net = max(worst_net, err)
            probed.update(r[0] for r in recs)
        elapsed = time.perf_counter() - t0
        rec.detail = f"layers {layers.detail}; network max relative error {worst_net:.2e} over 100 seeds"
        assert layers.passed
        assert worst_net < 1e-4
        assert probed == set(names)
        assert elapsed < 120


def test_constraint_invariant(criterion, tmp_path):
    with criterion(3, "constraint invariant") as rec:
        sc = gen_tabular(hierarchy_spec(), 3000, 21)
        s = split_cohort(sc.cohort.labels, 2)
        tr, va = sc.cohort.subset(s.train), sc.cohort.subset(s.validation)
        z = np.random.default_rng(3).standard_normal(len(sc.cohort))
        seen = []

        def on_step(_, p):
            seen.append(min(p["w"].min(), p["wv"][0]))

        cfg = TrainConfig(seed=4)
        model, hist = train(init_model("all", tr, ("cd", "edm", "video"), cfg), tr, va, cfg,
                            z[s.train], z[s.validation], on_step=on_step)
        model.save(tmp_path / "m.json")
        doc = json.loads((tmp_path / "m.json").read_text())
        saved = [b["weight"] for b in doc["poly_branches"]] + [doc["video_weight"]]
        rec.detail = f"{len(seen)} steps, min fusion weight {min(seen):.3g}, saved min {min(saved):.3g}"
        assert len(seen) == hist.steps > 0
        assert min(seen) >= 0.0 and hist.min_fusion_weight >= 0.0
        assert min(saved) >= 0.0


def _branch_oracle(b: PolyBranch, lo: float, hi: float, x: float) -> float:
    u = 2.0 * (x - lo) / (hi - lo) - 1.0
    return b.weight * sum(a * u ** (d + 1) for d, a in enumerate(b.coeffs))


def test_separability(criterion):
    with criterion(4, "separability") as rec:
        sc = gen_tabular(hierarchy_spec(), 2000, 8)
        s = split_cohort(sc.cohort.labels, 3)
        z = np.random.default_rng(5).standard_normal(len(sc.cohort))
        model, _ = fit_config("all", sc.cohort.subset(s.train), sc.cohort.subset(s.validation),
                              TrainConfig(max_epochs=30, seed=2), z[s.train], z[s.validation])
        rng = np.random.default_rng(6)
        rows = rng.choice(len(sc.cohort), 1000, replace=False)
        col = {n: j for j, n in enumerate(sc.cohort.names)}
        worst = 0.0
        for r in rows:
            x = sc.cohort.X[r]
            parts = [_branch_oracle(b, model.norm_stats.mins[b.feature], model.norm_stats.maxs[b.feature],
                                    x[col[b.feature]]) for b in model.poly]
            parts += [b.weight * x[col[b.feature]] for b in model.binary]
            parts.append(model.video_weight * z[r])
            expected = sum(parts) + model.bias
            worst = max(worst, abs(model_logodds(model, dict(zip(sc.cohort.names, x)), z[r]) - expected))
        shuffled = sc.cohort.copy()
        for j, name in enumerate(shuffled.names):
            if name != "age":
                shuffled.X[:, j] = rng.permutation(shuffled.X[:, j])
        a = risk_curve(model, "age", cohort=sc.cohort).odds_factor
        b = risk_curve(model, "age", cohort=shuffled).odds_factor
        rec.detail = f"max |logodds - sum of parts| {worst:.1e}; permuted curve identical: {a.tobytes() == b.tobytes()}"
        assert worst <= 1e-12
        assert a.tobytes() == b.tobytes()


def test_synthetic_recovery(criterion):
    with criterion(5, "synthetic recovery") as rec:
        t0 = time.perf_counter()
        spec = recovery_spec()
        sc = gen_tabular(spec, 20000, 0)
        s = split_cohort(sc.cohort.labels, 0)
        te = sc.cohort.subset(s.test)
        model, _ = fit_config("cd", sc.cohort.subset(s.train), sc.cohort.subset(s.validation), TrainConfig(seed=0))
        test_auc = auc(model.logodds(te), te.labels)
        oracle = oracle_auc(sc.true_prob[s.test], te.labels)
        weights = {e.feature: e.weight for e in rank_features(model)}
        signal = [f for f in spec.features if f.effect != "null"]
        null = [f for f in spec.features if f.effect == "null"]
        margin = min(weights[f.name] for f in signal) - max(weights[f.name] for f in null)
        rhos = {}
        for f in signal:
            lo, hi = np.percentile(sc.cohort.column(f.name), [5, 95])
            grid = np.linspace(lo, hi, 101)
            fitted = risk_curve(model, f.name, grid=grid).logodds[0]
            rhos[f.name] = spearmanr(fitted, f.effect_of_value(grid)).statistic
        elapsed = time.perf_counter() - t0
        rec.detail = (f"AUC {test_auc:.4f} vs oracle {oracle:.4f}; weight margin {margin:.3f}; "
                      f"min Spearman {min(rhos.values()):.3f}")
        assert abs(test_auc - oracle) <= 0.02
        assert margin > 0
        assert min(rhos.values()) >= 0.9
        assert elapsed < 600


def test_hierarchy_reproduction(criterion):
    with criterion(6, "hierarchy reproduction") as rec:
        t0 = time.perf_counter()
        sc = gen_tabular(hierarchy_spec(), 5000, 1)
        res = run_experiment(sc.cohort, config=ExperimentConfig(runs=5, seed=0, logistic_baseline=True))
        cd = np.mean([r.aucs["cd"] for r in res.reports])
        both = np.mean([r.aucs["cd+edm"] for r in res.reports])
        comp = next(c for c in res.comparisons if (c.model_a, c.model_b) == ("cd", "cd+edm"))
        table = res.table().splitlines()
        elapsed = time.perf_counter() - t0
        rec.detail = f"CD {cd:.3f} < CD+EDM {both:.3f}; t = {comp.t:.2f}, p = {comp.p:.2g}"
        assert both > cd
        assert comp.significant and comp.p < ALPHA == 0.01 / 5
        assert table[0].split()[:3] == ["Model", "input", "IMNN"] and "Logistic" in table[0]
        assert [ln.split()[0] for ln in table[1:4]] == ["CD", "EDM", "CD+EDM"]
        assert elapsed < 1800


def test_auc_oracle_equivalence(criterion):
    with criterion(7, "AUC oracle equivalence") as rec:
        t0 = time.perf_counter()
        rng = np.random.default_rng(2024)
        bad = 0
        done = 0
        while done < 500:
            n = int(rng.integers(2, 201))
            s = rng.integers(0, int(rng.integers(2, 30)), n).astype(float)
            y = rng.integers(0, 2, n)
            if y.min() == y.max():
                continue
            pos, neg = s[y == 1], s[y == 0]
            wins = sum(1.0 if p > q else 0.5 if p == q else 0.0 for p, q in itertools.product(pos, neg))
            bad += auc(s, y) != wins / (pos.size * neg.size)
            done += 1
        elapsed = time.perf_counter() - t0
        rec.detail = f"{done - bad}/{done} instances exact"
        assert bad == 0
        assert elapsed < 10


def test_normalization(criterion):
    with criterion(8, "normalization") as rec:
        X = np.array([[3.0], [7.5], [-2.0], [11.0]])
        st = minmax_fit(X, ["a"])
        ends = minmax_apply_column(np.array([-2.0, 11.0]), st.mins["a"], st.maxs["a"])
        extra = minmax_apply_column(np.array([12.0]), 0.0, 10.0)[0]
        rec.detail = f"train extremes -> {ends.tolist()}; x=12 on [0,10] -> {float(extra)!r}"
        assert ends.tolist() == [-1.0, 1.0]
        assert abs(extra - 1.4) <= 1e-12


def test_mice(criterion):
    with criterion(9, "MICE") as rec:
        rng = np.random.default_rng(0)
        n = 800
        cov = np.array([[1, 0.8, 0.6, 0.4], [0.8, 1, 0.7, 0.5], [0.6, 0.7, 1, 0.6], [0.4, 0.5, 0.6, 1]])
        full = rng.multivariate_normal(np.zeros(4), cov, n)
        mask = rng.uniform(size=full.shape) < 0.2
        X = full.copy()
        X[mask] = np.nan
        mice = mice_impute(X)
        mean = np.where(mask, np.nanmean(X, axis=0), X)
        rmse_mice = np.sqrt(np.mean((mice[mask] - full[mask]) ** 2))
        rmse_mean = np.sqrt(np.mean((mean[mask] - full[mask]) ** 2))
        lin = rng.normal(size=(n, 3))
        lin = np.column_stack([lin, 2.0 * lin[:, 0] - 0.5 * lin[:, 1] + 3.0 * lin[:, 2] + 1.0])
        hidden = rng.uniform(size=n) < 0.2
        L = lin.copy()
        L[hidden, 3] = np.nan
        err = np.abs(mice_impute(L)[hidden, 3] - lin[hidden, 3]).max()
        rec.detail = f"RMSE MICE {rmse_mice:.3f} vs mean {rmse_mean:.3f}; linear column error {err:.1e}"
        assert rmse_mice < rmse_mean
        assert err <= 1e-6


def test_logistic_degeneration(criterion):
    from sklearn.linear_model import LogisticRegression

    with criterion(10, "logistic-regression degeneration") as rec:
        rng = np.random.default_rng(10)
        n = 6000
        Xb = rng.integers(0, 2, size=(n, 6)).astype(float)
        logit = Xb @ np.array([1.0, -0.7, 0.4, 0.0, -1.2, 0.6]) - 0.3
        y = (rng.uniform(size=n) < sigmoid(logit)).astype(int)
        cohort = Cohort([FeatureSpec(f"b{k}", "binary") for k in range(6)], Xb, y)
        s = split_cohort(y, 5)
        tr, va, te = cohort.subset(s.train), cohort.subset(s.validation), cohort.subset(s.test)
        model, _ = fit_config("cd", tr, va, TrainConfig(degree=1, constrained=False, seed=1))
        ref = LogisticRegression(C=1e6).fit(tr.X, tr.labels)
        a, b = auc(model.logodds(te), te.labels), auc(ref.decision_function(te.X), te.labels)
        rec.detail = f"AUC {a:.4f} vs reference {b:.4f}"
        assert abs(a - b) <= 0.01


def test_video_smoke(criterion):
    with criterion(11, "video smoke") as rec:
        t0 = time.perf_counter()
        data = gen_videos(600, signal_strength=1.0, seed=3)
        s = split_cohort(data.labels, 0)
        net = build_video_net(DESK_CONFIG, seed=0)
        net, hist = train_video(net, data.clips[s.train], data.labels[s.train], data.clips[s.validation],
                                data.labels[s.validation], TrainConfig(max_epochs=50, batch_size=32, seed=0))
        test_auc = auc(net.score(data.clips[s.test])["pre_activation"], data.labels[s.test])
        elapsed = time.perf_counter() - t0
        rec.detail = f"test AUC {test_auc:.3f} after {len(hist.val_loss)} epochs"
        assert test_auc >= 0.85
        assert len(hist.val_loss) <= 50
        assert elapsed <= 1200


def test_determinism(criterion, tmp_path):
    def tree(root):
        return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}

    with criterion(12, "determinism") as rec:
        assert main(["synth", "--n", "1500", "--seed", "3", "--out", str(tmp_path / "s")]) == 0
        args = ["train", "--seed", "11", "--cohort", str(tmp_path / "s" / "cohort.csv"),
                "--schema", str(tmp_path / "s" / "schema.json")]
        assert main(args + ["--out", str(tmp_path / "a")]) == 0
        assert main(args + ["--out", str(tmp_path / "b")]) == 0
        a, b = tree(tmp_path / "a"), tree(tmp_path / "b")
        rec.detail = f"{len(a)} files compared, identical: {a == b}"
        assert len([k for k in a if k.endswith("model.json")]) == 15
        assert a == b
