import math

import numpy as np
import pytest

from separisk.eval_stats import auc
from separisk.synth import (
    GeneratorSpec,
    SynthFeature,
    gen_multimodal,
    gen_tabular,
    gen_videos,
    hierarchy_spec,
    mask_mcar,
    oracle_auc,
    recovery_spec,
)


def _null_spec(bias=0.0, k=4):
    return GeneratorSpec([SynthFeature(f"f{j}") for j in range(k)], bias=bias)


class TestGenTabular:
    @pytest.mark.parametrize("prev", [0.5, 0.16])
    def test_prevalence(self, prev):
        n = 20000
        sc = gen_tabular(_null_spec(math.log(prev / (1 - prev))), n, 3)
        assert abs(sc.cohort.labels.mean() - prev) <= 3 * math.sqrt(prev * (1 - prev) / n)

    def test_same_seed_same_cohort(self):
        a, b = gen_tabular(recovery_spec(), 500, 7), gen_tabular(recovery_spec(), 500, 7)
        np.testing.assert_array_equal(a.cohort.X, b.cohort.X)
        np.testing.assert_array_equal(a.cohort.labels, b.cohort.labels)
        assert (a.cohort.patient_id == b.cohort.patient_id).all()

    def test_different_seed_differs(self):
        assert not np.array_equal(gen_tabular(recovery_spec(), 50, 1).cohort.X, gen_tabular(recovery_spec(), 50, 2).cohort.X)

    def test_feature_layout(self):
        sc = gen_tabular(hierarchy_spec(), 300, 0)
        coh = sc.cohort
        assert coh.spec("smoker").kind == "binary"
        assert set(np.unique(coh.column("smoker"))) <= {0.0, 1.0}
        assert {s.name for s in coh.specs if s.modality == "edm"} == {"trmv", "ejection_fraction", "lvidd"}
        assert 40 < coh.column("age").mean() < 90

    def test_effects_in_original_units(self):
        f = SynthFeature("a", "quadratic", 2.0, loc=10.0, scale=5.0)
        np.testing.assert_allclose(f.effect_of_value([10.0, 15.0, 5.0]), [0.0, 2.0, 2.0])

    def test_unknown_effect(self):
        with pytest.raises(ValueError):
            SynthFeature("a", "cosine")

    def test_recovery_layout(self):
        spec = recovery_spec()
        effects = [f.effect for f in spec.features]
        assert effects.count("null") == 8 and len(effects) == 16


class TestOracleAuc:
    def test_deterministic_labels(self):
        p = np.array([0.0, 1.0, 0.0, 1.0])
        assert oracle_auc(p, p.astype(int)) == 1.0

    def test_constant_probabilities(self):
        assert oracle_auc(np.full(6, 0.3), [0, 1, 0, 1, 1, 0]) == 0.5

    def test_reuses_auc(self):
        sc = gen_tabular(recovery_spec(), 800, 4)
        assert oracle_auc(sc.true_prob, sc.cohort.labels) == auc(sc.true_prob, sc.cohort.labels)

    def test_single_class(self):
        with pytest.raises(ValueError):
            oracle_auc([0.2, 0.4], [1, 1])


def _clip_brightness(clips):
    return clips.max(axis=(2, 3)).mean(axis=1)


class TestVideos:
    def test_no_signal(self):
        v = gen_videos(400, signal_strength=0.0, seed=2, label_temperature=0)
        assert abs(auc(_clip_brightness(v.clips), v.labels) - 0.5) < 0.08

    def test_strong_signal_threshold(self):
        v = gen_videos(400, signal_strength=3.0, seed=2, label_temperature=0)
        assert oracle_auc(v.true_prob, v.labels) > 0.95
        assert auc(_clip_brightness(v.clips), v.labels) > 0.95

    def test_pixel_range(self):
        v = gen_videos(20, signal_strength=10.0, seed=0, noise=0.5)
        assert v.clips.min() >= 0.0 and v.clips.max() <= 1.0
        assert v.clips.shape == (20, 12, 28, 38)

    def test_deterministic(self):
        a, b = gen_videos(5, seed=8), gen_videos(5, seed=8)
        np.testing.assert_array_equal(a.clips, b.clips)


class TestMask:
    def test_rate_zero(self):
        X = np.arange(12.0).reshape(4, 3)
        out, mask = mask_mcar(X, 0.0, 1)
        np.testing.assert_array_equal(out, X)
        assert not mask.any()

    def test_rate_fraction(self):
        _, mask = mask_mcar(np.zeros((1000, 10)), 0.2, 5)
        assert abs(mask.mean() - 0.2) <= 0.012

    def test_deterministic(self):
        X = np.random.default_rng(0).normal(size=(50, 4))
        a, _ = mask_mcar(X, 0.3, 11)
        b, _ = mask_mcar(X, 0.3, 11)
        np.testing.assert_array_equal(np.isnan(a), np.isnan(b))

    def test_no_empty_column(self):
        out, _ = mask_mcar(np.ones((3, 5)), 0.5, 0)
        assert (~np.isnan(out)).any(axis=0).all()

    def test_gives_up(self):
        with pytest.raises(ValueError):
            mask_mcar(np.ones((1, 50)), 0.99, 0, max_tries=5)

    @pytest.mark.parametrize("rate", [-0.1, 1.0])
    def test_bad_rate(self, rate):
        with pytest.raises(ValueError):
            mask_mcar(np.ones((2, 2)), rate, 0)


class TestMultimodal:
    @pytest.fixture(scope="class")
    @staticmethod
    def data():
        return gen_multimodal(hierarchy_spec(), 1500, 0, dims=(4, 10, 12))

    def test_shapes(self, data):
        sc, clips, z = data
        assert clips.shape == (1500, 4, 10, 12) and z.shape == (1500,)
        assert sc.cohort.names == [f.name for f in hierarchy_spec().features]

    def test_latent_carries_signal(self, data):
        sc, clips, z = data
        assert auc(z, sc.cohort.labels) > 0.6
        assert auc(_clip_brightness(clips), sc.cohort.labels) > 0.55

    def test_true_prob_matches_generator(self, data):
        sc, _, z = data
        U = np.column_stack([(sc.cohort.X[:, j] - f.loc) / f.scale if f.kind != "binary" else sc.cohort.X[:, j]
                             for j, f in enumerate(sc.spec.features)])
        logit = sc.spec.true_logodds(U) + z
        np.testing.assert_allclose(sc.true_prob, 1 / (1 + np.exp(-logit)), rtol=1e-10)
