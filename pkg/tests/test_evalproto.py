import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cmcens.ensemble import FusedGalleryItem
from cmcens.errors import DegenerateVector, DimensionMismatch, EmptyGallery, EmptyScores, InvalidConfig
from cmcens.evalproto import (
    ProbeSet,
    build_index,
    export_report,
    open_set_search_eval,
    recall_at_1,
    render_csv,
    risk_coverage_curve,
    scores,
    search_top1,
    search_top1_batch,
    tar_at_far_verification,
)


# brute-force oracles: plain python loops, no shared code with the module

def _cos(a, b):
    return float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))


def scan_top1(gallery, labels, ids, q, qid=None):
    best, best_id, best_label = -np.inf, None, None
    for v, y, i in zip(gallery, labels, ids):
        if qid is not None and i == qid:
            continue
        s = _cos(q, v)
        if s > best or (s == best and i < best_id):
            best, best_id, best_label = s, i, y
    return best_label, best


def sweep_threshold(genuine, impostor, far):
    """Smallest candidate threshold (from impostor scores and -inf) with FAR <= target."""
    candidates = sorted(set(impostor) | {-np.inf})
    for t in candidates:
        if sum(s > t for s in impostor) / len(impostor) <= far + 1e-12:
            return t, sum(s > t for s in genuine) / len(genuine), sum(s > t for s in impostor) / len(impostor)
    raise AssertionError("unreachable")


def scan_open_set(gallery, labels, ids, mated, mated_labels, nonmated, far):
    non = [scan_top1(gallery, labels, ids, q)[1] for q in nonmated]
    t, _, achieved = sweep_threshold([0.0], non, far)
    hits = 0
    for q, y in zip(mated, mated_labels):
        lab, s = scan_top1(gallery, labels, ids, q)
        hits += int(lab == y and s > t)
    return t, hits / len(mated), achieved


def random_instance(seed, classes=20, open_classes=10, per=3, dim=8):
    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((classes + open_classes, dim))
    g_lab = np.repeat(np.arange(classes), 2)
    gallery = centers[g_lab] + 0.8 * rng.standard_normal((len(g_lab), dim))
    m_lab = np.repeat(np.arange(classes), per)
    mated = centers[m_lab] + 0.8 * rng.standard_normal((len(m_lab), dim))
    n_lab = np.repeat(np.arange(classes, classes + open_classes), per)
    nonmated = centers[n_lab] + 0.8 * rng.standard_normal((len(n_lab), dim))
    ids = rng.permutation(1000)[: len(g_lab)]
    return gallery, g_lab, ids, mated, m_lab, nonmated, n_lab


class TestIndex:
    def test_unit_norm(self):
        idx = build_index(np.random.default_rng(0).standard_normal((3, 5)), [0, 1, 2], [0, 1, 2])
        assert len(idx) == 3
        np.testing.assert_allclose(np.linalg.norm(idx.units, axis=1), 1.0, atol=1e-9)

    def test_degenerate_sentinel(self):
        items = [FusedGalleryItem(i, i, v, None) for i, v in enumerate([[1.0, 0.0], [0.0, 0.0], [0.0, 2.0]])]
        idx = build_index(items)
        assert len(idx) == 3 and idx.sentinel.tolist() == [False, True, False]
        assert scores(idx, [[1.0, 1.0]])[0, 1] == -np.inf

    def test_empty(self):
        with pytest.raises(EmptyGallery):
            build_index(np.zeros((0, 4)), [], [])

    def test_ragged(self):
        with pytest.raises(DimensionMismatch):
            build_index([FusedGalleryItem(0, 0, np.ones(2), None), FusedGalleryItem(1, 0, np.ones(3), None)])


class TestSearch:
    def test_exact_match(self):
        g = np.random.default_rng(1).standard_normal((6, 4))
        lab, s = search_top1(build_index(g, np.arange(6) * 10, np.arange(6)), g[3])
        assert lab == 30 and s == pytest.approx(1.0, abs=1e-12)

    def test_orthogonal_tie(self):
        idx = build_index([[1, 0, 0], [0, 1, 0]], [5, 6], [9, 4])
        lab, s = search_top1(idx, [0, 0, 1])
        assert (lab, s) == (6, 0.0)

    def test_degenerate_query(self):
        with pytest.raises(DegenerateVector):
            search_top1(build_index([[1.0, 0.0]], [0], [0]), [0.0, 0.0])

    def test_self_exclusion(self):
        idx = build_index([[1.0, 0.0], [0.6, 0.8]], [0, 1], [7, 8])
        assert search_top1(idx, [1.0, 0.0], query_item_id=7)[0] == 1
        with pytest.raises(EmptyGallery):
            search_top1(build_index([[1.0, 0.0]], [0], [7]), [1.0, 0.0], query_item_id=7)

    def test_linear_scan_oracle(self):
        rng = np.random.default_rng(2)
        g = rng.standard_normal((50, 6))
        labels, ids = rng.integers(0, 10, 50), rng.permutation(50)
        idx = build_index(g, labels, ids)
        q = rng.standard_normal((1000, 6))
        lab, best, _ = search_top1_batch(idx, q)
        for k in range(1000):
            want_lab, want_s = scan_top1(g, labels, ids, q[k])
            assert lab[k] == want_lab
            assert best[k] == pytest.approx(want_s, abs=1e-12)


class TestVerification:
    def test_separated(self):
        p = tar_at_far_verification([1.0] * 10, [0.0] * 100, 0.01)
        assert (p.threshold, p.tar, p.achieved_far) == (0.0, 1.0, 0.0)

    def test_inverted(self):
        assert tar_at_far_verification([0.0, 0.1], [0.5, 0.6, 0.7], 0.5).tar == 0.0

    def test_worked_example(self):
        imp = [0.05 * k for k in range(1, 11)]
        p = tar_at_far_verification([0.9, 0.8, 0.7], imp, 0.1)
        assert p.threshold == pytest.approx(0.45)
        assert (p.tar, p.achieved_far) == (1.0, 0.1)

    def test_accept_all(self):
        p = tar_at_far_verification([0.1], [0.5, 0.6], 1.0)
        assert p.threshold == -np.inf and p.tar == 1.0 and p.achieved_far == 1.0

    def test_errors(self):
        with pytest.raises(EmptyScores):
            tar_at_far_verification([], [0.1], 0.1)
        with pytest.raises(InvalidConfig):
            tar_at_far_verification([0.1], [0.1], 0.0)

    @pytest.mark.parametrize("seed", range(20))
    def test_sweep_oracle(self, seed):
        rng = np.random.default_rng(seed)
        gen = np.round(rng.normal(0.5, 0.2, 60), 2)
        imp = np.round(rng.normal(0.2, 0.2, int(rng.integers(5, 200))), 2)
        for far in (0.001, 0.01, 0.05, 0.1, 0.5, 1.0):
            p = tar_at_far_verification(gen, imp, far)
            t, tar, achieved = sweep_threshold(list(gen), list(imp), np.floor(far * len(imp) + 1e-9) / len(imp))
            assert p.threshold == t and p.tar == tar and p.achieved_far == achieved

    @settings(max_examples=80)
    @given(st.lists(st.floats(-1, 1), min_size=1, max_size=50), st.lists(st.floats(-1, 1), min_size=1, max_size=80),
           st.floats(1e-4, 1.0), st.floats(1e-4, 1.0))
    def test_monotone_and_bounded(self, gen, imp, f1, f2):
        lo, hi = sorted((f1, f2))
        a, b = tar_at_far_verification(gen, imp, lo), tar_at_far_verification(gen, imp, hi)
        assert a.tar <= b.tar
        assert a.achieved_far <= lo + 1e-12 and b.achieved_far <= hi + 1e-12


class TestOpenSet:
    def test_separated_construction(self):
        eye = np.eye(6)
        idx = build_index(eye[:4], np.arange(4), np.arange(4))
        probes = ProbeSet(eye[:4], np.arange(4), eye[4:], np.array([10, 11]))
        assert open_set_search_eval(idx, probes, 0.1).tar == 1.0

    def test_wrong_label_counts_as_failure(self):
        eye = np.eye(6)
        idx = build_index(eye[:4], np.arange(4), np.arange(4))
        probes = ProbeSet(eye[:4], np.array([0, 1, 2, 0]), eye[4:], np.array([10, 11]))
        assert open_set_search_eval(idx, probes, 0.1, check=False).tar == 0.75

    def test_validation(self):
        idx = build_index(np.eye(3), [0, 1, 2], [0, 1, 2])
        with pytest.raises(InvalidConfig):
            open_set_search_eval(idx, ProbeSet(np.eye(3), [0, 1, 9], np.eye(3)[:1], [7]), 0.1)
        with pytest.raises(InvalidConfig):
            open_set_search_eval(idx, ProbeSet(np.eye(3), [0, 1, 2], np.eye(3)[:1], [1]), 0.1)
        with pytest.raises(EmptyScores):
            open_set_search_eval(idx, ProbeSet(np.eye(3), [0, 1, 2], np.zeros((0, 3))), 0.1)

    @pytest.mark.parametrize("seed", range(20))
    def test_exhaustive_oracle(self, seed):
        g, gl, ids, m, ml, n, nl = random_instance(seed)
        idx = build_index(g, gl, ids)
        probes = ProbeSet(m, ml, n, nl)
        for far in (0.01, 0.1, 0.3):
            p = open_set_search_eval(idx, probes, far)
            t, tar, achieved = scan_open_set(g, gl, ids, m, ml, n, np.floor(far * len(n) + 1e-9) / len(n))
            assert p.threshold == pytest.approx(t, abs=1e-12)
            assert p.tar == tar and p.achieved_far == achieved
            assert p.achieved_far <= far


class TestRecall:
    def test_identity(self):
        g = np.eye(5)
        assert recall_at_1(build_index(g, np.arange(5), np.arange(5)), g * 3, np.arange(5)) == 1.0

    def test_disjoint_classes(self):
        idx = build_index(np.random.default_rng(0).standard_normal((4, 3)), [0] * 4, range(4))
        assert recall_at_1(idx, np.ones((2, 3)), [1, 1]) == 0.0

    @pytest.mark.parametrize("seed", range(20))
    def test_leave_one_out_oracle(self, seed):
        rng = np.random.default_rng(100 + seed)
        centers = rng.standard_normal((30, 6))
        labels = np.repeat(np.arange(30), 3)
        x = centers[labels] + 0.9 * rng.standard_normal((90, 6))
        ids = rng.permutation(90) + 5
        got = recall_at_1(build_index(x, labels, ids), x, labels, ids)
        want = np.mean([scan_top1(x, labels, ids, x[k], ids[k])[0] == labels[k] for k in range(90)])
        assert got == want


def _items(vectors, labels, us):
    return [FusedGalleryItem(i, int(y), np.asarray(v, float), u) for i, (v, y, u) in enumerate(zip(vectors, labels, us))]


class TestRiskCoverage:
    def test_identity_coverage(self):
        g, gl, ids, m, ml, n, nl = random_instance(3)
        items = [FusedGalleryItem(int(i), int(y), v, 0.1) for v, y, i in zip(g, gl, ids)]
        probes = ProbeSet(m, ml, n, nl)
        (pt,) = risk_coverage_curve(items, probes, "open_set_tar", [1.0], far=0.1)
        assert pt.metric_value == open_set_search_eval(build_index(g, gl, ids), probes, 0.1).tar
        assert pt.rule == {"reclassified_as_nonmated": 0}

    def test_adversarial_item_removed(self):
        # item 4 is a class-1 entry sitting exactly on class 0's query, with high variance
        gallery = [[1, 0, 0], [0, 1, 0], [0, 0, 1], [0, 1, 1], [1, 0.01, 0]]
        labels = [0, 1, 2, 3, 1]
        us = [0.1, 0.1, 0.1, 0.1, 1.0]
        items = _items(gallery, labels, us)
        queries = (np.array([[1, 0.02, 0], [0, 1, 0.05], [0, 0.05, 1], [0, 1, 1.1]]), np.array([0, 1, 2, 3]), None)
        pts = risk_coverage_curve(items, queries, "recall_at_1", [1.0, 0.8])
        assert pts[1].metric_value > pts[0].metric_value
        assert pts[0].metric_value == 0.75 and pts[1].metric_value == 1.0

    def test_open_set_reclassification(self):
        eye = np.eye(5)
        items = _items(eye[:4], [0, 1, 2, 3], [0.1, 0.2, 0.3, 0.9])
        probes = ProbeSet(eye[:4], np.arange(4), eye[4:], np.array([9]))
        pts = risk_coverage_curve(items, probes, "open_set_tar", [1.0, 0.75], far=0.5)
        assert pts[1].rule == {"reclassified_as_nonmated": 1}

    def test_recall_drops_rejected_class(self):
        eye = np.eye(3)
        items = _items(eye, [0, 1, 2], [0.1, 0.2, 0.9])
        pts = risk_coverage_curve(items, (eye, [0, 1, 2], None), "recall_at_1", [1.0, 0.5])
        assert pts[1].rule == {"dropped_queries": 2}
        assert pts[1].metric_value == 1.0

    def test_random_policy_averages_seeds(self):
        g, gl, ids, m, ml, n, nl = random_instance(4)
        items = [FusedGalleryItem(int(i), int(y), v, 0.1) for v, y, i in zip(g, gl, ids)]
        pts = risk_coverage_curve(items, ProbeSet(m, ml, n, nl), "open_set_tar", [1.0, 0.6], "random", [0, 1, 2], 0.1)
        assert pts[0].policy["seed_count"] == 3
        assert [p.coverage for p in pts] == [1.0, 0.6]

    @pytest.mark.parametrize("covs", [[0.5, 0.9], [1.0, 1.0], [1.2], []])
    def test_bad_coverages(self, covs):
        items = _items(np.eye(2), [0, 1], [0.1, 0.2])
        with pytest.raises(InvalidConfig):
            risk_coverage_curve(items, (np.eye(2), [0, 1], None), "recall_at_1", covs)

    def test_shrink_preserves_scores(self):
        rng = np.random.default_rng(9)
        g = rng.standard_normal((12, 5))
        q = rng.standard_normal((7, 5))
        full = scores(build_index(g, np.arange(12), np.arange(12)), q)
        keep = [0, 3, 4, 9]
        np.testing.assert_array_equal(scores(build_index(g[keep], keep, keep), q), full[:, keep])


class TestReport:
    def _results(self):
        return {"config": {"a": 1}, "curves": [
            {"curve": "open_set_tar", "x_kind": "far", "points": [{"x": 0.1, "value": 2 / 3, "policy": "",
                                                                   "seed_count": 1}]},
            {"curve": "risk", "x_kind": "coverage", "points": [{"x": 0.9, "value": 0.5, "policy": "random",
                                                                "seed_count": 5}]}]}

    def test_round_trip(self, tmp_path):
        res = self._results()
        js, _ = export_report(res, tmp_path / "r.json")
        assert json.loads(js.read_text()) == res

    def test_empty_is_header_only(self, tmp_path):
        _, cs = export_report({}, tmp_path / "r.json")
        assert cs.read_bytes() == b"curve,x_kind,x,value,policy,seed_count\n"

    def test_csv_format(self):
        lines = render_csv(self._results()).splitlines()
        assert lines[1] == "open_set_tar,far,0.1,0.666666667,,1"
        assert lines[2] == "risk,coverage,0.9,0.5,random,5"

    def test_deterministic(self, tmp_path):
        a = export_report(self._results(), tmp_path / "a.json")
        b = export_report(self._results(), tmp_path / "b.json")
        for x, y in zip(a, b):
            assert x.read_bytes() == y.read_bytes()
