import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cmcens.core import EmbeddingSet
from cmcens.ensemble import (
    FusedGalleryItem,
    RejectionMode,
    RejectionPolicy,
    TransformedStack,
    apply_rejection,
    batch_variance,
    fuse_mean,
    fuse_sets,
    read_fused_gallery,
    variance,
    write_fused_gallery,
)
from cmcens.errors import DegenerateVector, InsufficientModels, InvalidConfig


def brute_variance(x):
    """Direct enumeration of pairwise cosine distances."""
    pairs = []
    for a, b in itertools.combinations(x, 2):
        pairs.append(1.0 - np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))
    return float(np.mean(pairs))


def items_with_variance(us):
    return [FusedGalleryItem(i, 0, np.array([1.0, 0.0]), u) for i, u in enumerate(us)]


class TestFuseMean:
    def test_identical_copies(self):
        v = np.array([0.3, -1.2, 2.0])
        out = fuse_mean(TransformedStack(4, 1, [v, v, v]))
        np.testing.assert_allclose(out.fused, v, atol=1e-15)
        assert out.variance == pytest.approx(0.0, abs=1e-12)
        assert not out.degenerate

    def test_orthogonal_pair(self):
        out = fuse_mean(TransformedStack(0, 0, [[1, 0], [0, 1]]))
        np.testing.assert_allclose(out.fused, [0.5, 0.5])
        assert out.variance == pytest.approx(1.0)

    def test_cancelling_pair_flags_degenerate(self):
        out = fuse_mean(TransformedStack(0, 0, [[1, 0], [-1, 0]]))
        np.testing.assert_array_equal(out.fused, [0.0, 0.0])
        assert out.degenerate
        assert out.variance == pytest.approx(2.0)
        np.testing.assert_array_equal(out.unit, [0.0, 0.0])

    def test_single_member_has_no_variance(self):
        out = fuse_mean(TransformedStack(0, 0, [[1.0, 2.0]]))
        assert out.variance is None

    def test_empty_stack(self):
        with pytest.raises(InsufficientModels):
            TransformedStack(0, 0, np.zeros((0, 3)))


class TestVariance:
    def test_identical(self):
        assert variance(np.ones((3, 4))) == pytest.approx(0.0, abs=1e-12)

    def test_orthogonal_pair(self):
        assert variance([[1, 0], [0, 1]]) == pytest.approx(1.0)

    def test_three_members(self):
        assert variance([[1, 0], [0, 1], [-1, 0]]) == pytest.approx(4 / 3, abs=1e-12)

    def test_needs_two(self):
        with pytest.raises(InsufficientModels):
            variance([[1.0, 0.0]])

    def test_zero_member(self):
        with pytest.raises(DegenerateVector):
            variance([[1.0, 0.0], [0.0, 0.0]])

    def test_euclidean_option(self):
        assert variance([[0, 0.5], [3, 4.5]], metric="euclidean") == pytest.approx(5.0)

    @pytest.mark.parametrize("seed", range(10))
    def test_against_enumeration(self, seed):
        x = np.random.default_rng(seed).standard_normal((5, 7))
        assert variance(x) == pytest.approx(brute_variance(x), abs=1e-12)

    @settings(max_examples=60)
    @given(st.integers(2, 6), st.integers(2, 8), st.integers(0, 2**32 - 1))
    def test_permutation_and_scale_invariance(self, n, dim, seed):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((n, dim))
        perm = rng.permutation(n)
        scale = rng.uniform(0.01, 100.0, size=(n, 1))
        u = variance(x)
        assert variance(x[perm]) == pytest.approx(u, abs=1e-12)
        assert variance(x * scale) == pytest.approx(u, abs=1e-12)
        np.testing.assert_allclose(fuse_mean(TransformedStack(0, 0, x[perm])).fused, x.mean(axis=0), atol=1e-12)

    def test_batch_matches_single(self):
        x = np.random.default_rng(3).standard_normal((4, 30, 6))
        got = batch_variance(x)
        want = [variance(x[:, g]) for g in range(30)]
        np.testing.assert_allclose(got, want, atol=1e-12)


class TestFuseSets:
    def test_matches_fuse_mean(self):
        rng = np.random.default_rng(5)
        ids = np.arange(10) * 3
        sets = [EmbeddingSet(f"m{k}", rng.standard_normal((10, 4)), ids % 4, ids) for k in range(3)]
        out = fuse_sets(sets)
        for g, item in enumerate(out):
            ref = fuse_mean(TransformedStack(int(ids[g]), 0, [s.as_float64()[g] for s in sets]))
            np.testing.assert_allclose(item.fused, ref.fused, atol=1e-12)
            assert item.variance == pytest.approx(ref.variance, abs=1e-12)
            assert item.contributing_models == ("m0", "m1", "m2")

    @settings(max_examples=40)
    @given(st.integers(0, 2**32 - 1))
    def test_normalization_does_not_change_ranking(self, seed):
        rng = np.random.default_rng(seed)
        fused = [it.fused for it in fuse_sets(rng.standard_normal((3, 12, 5)), np.zeros(12), np.arange(12))]
        q = rng.standard_normal(5)
        raw = [np.dot(q, f) / np.linalg.norm(f) for f in fused]
        unit = [np.dot(q, f / np.linalg.norm(f)) for f in fused]
        assert np.argmax(raw) == np.argmax(unit)

    def test_round_trip_with_sidecar(self, tmp_path):
        rng = np.random.default_rng(6)
        items = fuse_sets(rng.standard_normal((2, 5, 4)), np.arange(5), np.arange(5) + 100, ("a", "b"))
        write_fused_gallery(items, "query", tmp_path / "g.cmce")
        back = read_fused_gallery(tmp_path / "g.cmce")
        for a, b in zip(items, back):
            assert a.item_id == b.item_id and a.class_label == b.class_label
            assert a.variance == b.variance
            assert b.contributing_models == ("a", "b")
            np.testing.assert_allclose(a.fused, b.fused, rtol=1e-6)


class TestRejection:
    def test_full_coverage(self):
        items = items_with_variance([0.3, 0.1, 0.2])
        kept, rejected = apply_rejection(items, RejectionPolicy("coverage_quantile", 1.0))
        assert kept == items and rejected == []

    def test_threshold_zero_rejects_all(self):
        kept, rejected = apply_rejection(items_with_variance([0.1, 0.2]), RejectionPolicy("variance_threshold", 0.0))
        assert kept == [] and len(rejected) == 2

    def test_coverage_sort_oracle(self):
        items = items_with_variance([i / 10 for i in range(10)])
        kept, _ = apply_rejection(items, RejectionPolicy(RejectionMode.COVERAGE_QUANTILE, 0.7))
        assert [it.item_id for it in kept] == list(range(7))

    def test_ties_break_by_item_id(self):
        items = [FusedGalleryItem(i, 0, np.ones(2), 0.5) for i in (9, 3, 7, 1)]
        kept, _ = apply_rejection(items, RejectionPolicy("coverage_quantile", 0.5))
        assert sorted(it.item_id for it in kept) == [1, 3]

    def test_needs_variance(self):
        items = [FusedGalleryItem(0, 0, np.ones(2), None)]
        with pytest.raises(InsufficientModels):
            apply_rejection(items, RejectionPolicy("coverage_quantile", 0.5))

    @pytest.mark.parametrize("mode, value", [("coverage_quantile", 0.0), ("random", 1.5), ("variance_threshold", -1)])
    def test_invalid_policy(self, mode, value):
        with pytest.raises(InvalidConfig):
            RejectionPolicy(mode, value)

    def test_random_is_seeded(self):
        items = items_with_variance(np.linspace(0, 1, 50))
        a, _ = apply_rejection(items, RejectionPolicy("random", 0.6, seed=11))
        b, _ = apply_rejection(items, RejectionPolicy("random", 0.6, seed=11))
        c, _ = apply_rejection(items, RejectionPolicy("random", 0.6, seed=12))
        assert [it.item_id for it in a] == [it.item_id for it in b]
        assert [it.item_id for it in a] != [it.item_id for it in c]
        assert len(a) == 30

    @settings(max_examples=80)
    @given(st.lists(st.floats(0, 2, allow_nan=False), min_size=1, max_size=40), st.floats(0.01, 1.0))
    def test_quantile_properties(self, us, cov):
        items = items_with_variance(us)
        kept, rejected = apply_rejection(items, RejectionPolicy("coverage_quantile", cov))
        assert len(kept) == int(np.floor(cov * len(us) + 1e-9))
        assert len(kept) + len(rejected) == len(us)
        if kept and rejected:
            assert max(it.variance for it in kept) <= min(it.variance for it in rejected)
