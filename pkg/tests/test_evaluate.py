import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import pairwise_auc, unit_rows
from tailmix.data import SynthConfig, class_prototypes, generate_synthetic_longtail
from tailmix.errors import EmptyTestSplit, NotNormalized, ValidationError
from tailmix.evaluate import (
    MIMIC_THRESHOLDS,
    SYNTHETIC_THRESHOLDS,
    bin_classes_by_frequency,
    macro_auc_report,
    pca_2d_projection,
    roc_auc,
    zero_shot_scores,
)


class TestZeroShot:
    def test_self_and_orthogonal(self):
        S = zero_shot_scores(np.eye(3), np.eye(3))
        np.testing.assert_array_equal(S, np.eye(3))

    def test_double_loop_oracle(self):
        rng = np.random.default_rng(0)
        img, proto = unit_rows(rng, 16, 8), unit_rows(rng, 12, 8)
        S = zero_shot_scores(img, proto)
        naive = [[sum(a * b for a, b in zip(x, p)) for p in proto] for x in img]
        np.testing.assert_allclose(S, naive, atol=1e-12)
        assert np.abs(S).max() <= 1 + 1e-6

    def test_rejects_unnormalized(self):
        with pytest.raises(NotNormalized):
            zero_shot_scores(2 * np.eye(2), np.eye(2))


class TestAuc:
    def test_perfect(self):
        assert roc_auc([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == 1.0

    def test_all_tied(self):
        assert roc_auc([0.3] * 6, [1, 0, 1, 0, 0, 1]) == 0.5

    def test_undefined(self):
        assert roc_auc([0.1, 0.2], [1, 1]) is None
        assert roc_auc([0.1, 0.2], [0, 0]) is None

    def test_random_fixture_against_pairs(self):
        rng = np.random.default_rng(1)
        s = rng.normal(size=200)
        y = rng.random(200) < 0.3
        assert abs(roc_auc(s, y) - pairwise_auc(s, y)) <= 1e-12

    @settings(max_examples=100, deadline=None)
    @given(
        st.lists(st.tuples(st.integers(0, 5), st.booleans()), min_size=2, max_size=60).filter(
            lambda xs: 0 < sum(y for _, y in xs) < len(xs)
        )
    )
    def test_heavy_ties_against_pairs(self, rows):
        s = [float(v) for v, _ in rows]
        y = [b for _, b in rows]
        assert abs(roc_auc(s, y) - pairwise_auc(s, y)) <= 1e-12

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), n=st.integers(2, 80))
    def test_transform_invariance_and_symmetry(self, seed, n):
        rng = np.random.default_rng(seed)
        s = np.round(rng.normal(size=n), 1)
        y = rng.random(n) < 0.5
        a = roc_auc(s, y)
        if a is None:
            return
        assert abs(roc_auc(np.exp(s), y) - a) <= 1e-12
        assert abs(roc_auc(3.0 * s - 7.0, y) - a) <= 1e-12
        assert abs(a + roc_auc(-s, y) - 1.0) <= 1e-12


class TestBinning:
    def test_mimic_scale(self):
        rng = np.random.default_rng(2)
        counts = np.concatenate(
            [rng.integers(10_001, 60_000, 11), rng.integers(1000, 10_001, 17), rng.integers(1, 1000, 12)]
        )
        g = bin_classes_by_frequency(counts, MIMIC_THRESHOLDS)
        assert g.tier_counts() == {"common": 11, "medium": 17, "rare": 12}
        assert g.rare.sum() == 12 and g.base.sum() == 28

    def test_boundaries(self):
        g = bin_classes_by_frequency([999, 1000, 10_000, 10_001])
        assert g.tiers == ["rare", "medium", "medium", "common"]

    def test_partition(self):
        g = bin_classes_by_frequency(np.arange(0, 20_000, 500))
        assert np.all(g.base ^ g.rare)
        assert sum(g.tier_counts().values()) == 40

    def test_unordered_thresholds(self):
        with pytest.raises(ValidationError):
            bin_classes_by_frequency([1], (10, 5))

    def test_synthetic_default(self):
        syn = generate_synthetic_longtail(SynthConfig())
        g = bin_classes_by_frequency(syn.dataset.counts(), SYNTHETIC_THRESHOLDS)
        assert g.rare.sum() == 12
        np.testing.assert_array_equal(g.rare, syn.tiers == 2)


class TestMacroReport:
    def _groups(self, tiers):
        counts = {"common": 1000, "medium": 100, "rare": 1}
        return bin_classes_by_frequency([counts[t] for t in tiers], SYNTHETIC_THRESHOLDS)

    def test_perfect(self):
        Y = np.eye(4, dtype=bool)[[0, 1, 2, 3, 0, 1]]
        rep = macro_auc_report(Y.astype(float), Y, self._groups(["common", "medium", "rare", "rare"]), list("abcd"))
        assert rep.total == rep.base == rep.rare == 1.0

    def test_undefined_excluded(self):
        rng = np.random.default_rng(3)
        Y = rng.random((30, 3)) < 0.5
        Y[:, 1] = False
        S = rng.normal(size=(30, 3))
        rep = macro_auc_report(S, Y, self._groups(["common", "rare", "rare"]), ["x", "y", "z"])
        assert rep.undefined == ["y"] and rep.per_class[1] is None
        assert rep.rare == rep.per_class[2]
        assert rep.total == pytest.approx((rep.per_class[0] + rep.per_class[2]) / 2, abs=1e-15)

    def test_empty_split(self):
        with pytest.raises(EmptyTestSplit):
            macro_auc_report(np.zeros((0, 2)), np.zeros((0, 2), bool), self._groups(["rare", "rare"]), ["a", "b"])

    def test_misaligned(self):
        with pytest.raises(ValidationError):
            macro_auc_report(np.zeros((3, 2)), np.zeros((3, 3), bool), self._groups(["rare"] * 2), ["a", "b"])

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1))
    def test_macros_within_range(self, seed):
        rng = np.random.default_rng(seed)
        C = 6
        Y = rng.random((25, C)) < 0.3
        S = rng.normal(size=(25, C))
        tiers = list(rng.choice(["common", "medium", "rare"], size=C))
        rep = macro_auc_report(S, Y, self._groups(tiers), [str(j) for j in range(C)])
        defined = [a for a in rep.per_class if a is not None]
        if defined:
            assert min(defined) <= rep.total <= max(defined)
        for group, value in (("base", rep.base), ("rare", rep.rare)):
            vals = [a for a, t in zip(rep.per_class, rep.tiers) if a is not None and (t == "rare") == (group == "rare")]
            if vals:
                assert min(vals) <= value <= max(vals)
            else:
                assert value is None

    def test_synthetic_seed0_scripted(self):
        syn = generate_synthetic_longtail(SynthConfig())
        ds = syn.dataset
        test = ds.indices("test")
        X = syn.embeddings.matrix[test].astype(np.float64)
        X /= np.linalg.norm(X, axis=1, keepdims=True)
        P = class_prototypes(ds.vocabulary, X.shape[1])
        groups = bin_classes_by_frequency(ds.counts(), SYNTHETIC_THRESHOLDS)
        rep = macro_auc_report(zero_shot_scores(X, P), ds.label_matrix(test), groups, ds.vocabulary)

        # independent script: explicit loops and pairwise AUCs
        per_class = []
        for j, name in enumerate(ds.vocabulary):
            scores = [float(np.dot(X[r], P[j])) for r in range(len(test))]
            labels = [name in ds.label_sets[i] for i in test]
            per_class.append(pairwise_auc(scores, labels))
        rare = [a for a, c in zip(per_class, ds.counts()) if c < 50]
        base = [a for a, c in zip(per_class, ds.counts()) if c >= 50]
        for got, want in zip(rep.per_class, per_class):
            assert got == pytest.approx(want, abs=1e-12)
        assert rep.rare == pytest.approx(np.mean(rare), abs=1e-12)
        assert rep.base == pytest.approx(np.mean(base), abs=1e-12)
        assert rep.total == pytest.approx(np.mean(per_class), abs=1e-12)

    def test_writers(self, tmp_path):
        Y = np.array([[1, 0], [0, 1], [1, 0]], dtype=bool)
        rep = macro_auc_report(np.array([[0.9, 0.1], [0.2, 0.8], [0.7, 0.3]]), Y, self._groups(["common", "rare"]), ["a", "b"])
        rep.write_json(tmp_path / "r.json", {"config": {"seed": 0}})
        doc = json.loads((tmp_path / "r.json").read_text())
        assert doc["macro"] == {"total": 1.0, "base": 1.0, "rare": 1.0} and doc["config"] == {"seed": 0}
        rep.write_csv(tmp_path / "r.csv")
        rows = list(csv.reader(open(tmp_path / "r.csv")))
        assert rows == [["class", "count", "group", "auc"], ["a", "2", "base", "1.0"], ["b", "1", "rare", "1.0"]]


class TestPca:
    def test_centered_2d_preserves_variance(self):
        rng = np.random.default_rng(4)
        X = rng.normal(size=(40, 2)) * [3.0, 1.0]
        X -= X.mean(axis=0)
        Y = pca_2d_projection(X)
        assert abs(Y.var(axis=0).sum() - X.var(axis=0).sum()) < 1e-6
        # rotation/sign only: pairwise distances preserved
        d = lambda M: np.linalg.norm(M[:, None] - M[None], axis=-1)
        np.testing.assert_allclose(d(Y), d(X), atol=1e-8)

    def test_planar_reconstruction(self):
        rng = np.random.default_rng(5)
        basis = np.linalg.qr(rng.normal(size=(3, 2)))[0]
        X = rng.normal(size=(30, 2)) * [2.0, 0.5] @ basis.T + [1.0, -2.0, 0.5]
        Y = pca_2d_projection(X)
        Xc = X - X.mean(axis=0)
        axes = np.linalg.lstsq(Y, Xc, rcond=None)[0]
        assert np.abs(Y @ axes - Xc).max() < 1e-9

    def test_explained_variance_matches_eigh(self):
        X = np.random.default_rng(6).normal(size=(50, 8))
        Y = pca_2d_projection(X)
        C = np.cov(X.T, bias=True)
        top = np.sort(np.linalg.eigvalsh(C))[::-1][:2]
        np.testing.assert_allclose(Y.var(axis=0), top, atol=1e-6)

    def test_sign_convention_and_determinism(self):
        X = np.random.default_rng(7).normal(size=(20, 5))
        Y1, Y2 = pca_2d_projection(X, seed=0), pca_2d_projection(X, seed=0)
        np.testing.assert_array_equal(Y1, Y2)
        w, V = np.linalg.eigh(np.cov(X.T, bias=True))
        for j, v in enumerate((V[:, -1], V[:, -2])):
            v = v if v[np.argmax(np.abs(v))] > 0 else -v
            np.testing.assert_allclose(Y1[:, j], (X - X.mean(axis=0)) @ v, atol=1e-6)

    def test_rank_one(self):
        t = np.linspace(-1, 1, 10)
        Y = pca_2d_projection(np.outer(t, [1.0, 2.0, 2.0]))
        np.testing.assert_array_equal(Y[:, 1], 0.0)
        assert abs(Y[:, 0].var() - (t * 3).var()) < 1e-9

    def test_too_few_points(self):
        with pytest.raises(ValidationError):
            pca_2d_projection(np.ones((1, 3)))
