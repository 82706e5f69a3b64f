import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mixpose.evaluation import (OKS_THRESHOLDS, PosePrediction, _match, average_precision, decode,
                                duplicate_rate, nms, oks, predict, write_metrics_csv, write_pr_csv)
from mixpose.types import SYNTH_SKELETON, KeypointSet, MixtureField, PersonAnnotation, SkeletonSpec

ONE = SkeletonSpec(("a",), (0.1,))


def pose(points, score=0.5, index=0):
    return PosePrediction(KeypointSet(points), score, index)


def person(points, bbox=None):
    kp = KeypointSet(points)
    if bbox is None:
        lo, hi = kp.coords.min(axis=0) - 2, kp.coords.max(axis=0) + 2
        bbox = (*lo, *hi)
    return PersonAnnotation(kp, tuple(float(v) for v in bbox))


def random_field(rng, M=12, K_total=6):
    mu = rng.uniform(0, 64, size=(M, 2 * K_total))
    return MixtureField(mu, rng.uniform(0.5, 3, size=mu.shape), rng.uniform(0, 1, size=M) ** 3)


class TestDecode:
    def test_all_below_threshold(self):
        f = MixtureField(np.zeros((3, 4)), np.ones((3, 4)), [1e-6, 1e-5, 2e-5])
        assert decode(f, 1e-4) == []

    def test_threshold_zero_keeps_all(self):
        f = random_field(np.random.default_rng(0))
        assert len(decode(f, 0.0)) == 12

    def test_boundary(self):
        f = MixtureField(np.zeros((2, 4)), np.ones((2, 4)), [0.5, 1e-5])
        out = decode(f, 1e-4)
        assert len(out) == 1 and out[0].score == 0.5
        assert len(decode(MixtureField(np.zeros((1, 4)), np.ones((1, 4)), [1e-4]), 1e-4)) == 1

    def test_center_dims_dropped(self):
        mu = np.arange(12.0).reshape(1, 12)
        (p,) = decode(MixtureField(mu, np.ones_like(mu), [0.3]), 0.0)
        assert p.keypoints.K == 5
        np.testing.assert_array_equal(p.keypoints.flat(), np.arange(10.0))


class TestNMS:
    def test_identical_poses(self):
        a = pose([(0, 0), (10, 10)], 0.9, 0)
        b = pose([(0, 0), (10, 10)], 0.8, 1)
        assert nms([b, a]) == [a]

    def test_disjoint_poses(self):
        a = pose([(0, 0), (1, 1)], 0.4, 0)
        b = pose([(5, 5), (6, 6)], 0.9, 1)
        assert nms([a, b]) == [b, a]

    def test_iou_exactly_threshold_keeps_both(self):
        # boxes (0,0,10,10) and (0,0,10,7): IoU = 70/100 exactly
        a = pose([(0, 0), (10, 10)], 0.9, 0)
        b = pose([(0, 0), (10, 7)], 0.8, 1)
        assert len(nms([a, b], 0.7)) == 2
        assert len(nms([a, b], 0.69)) == 1

    def test_score_ties_prefer_lower_index(self):
        a = pose([(0, 0), (4, 4)], 0.5, 3)
        b = pose([(0, 0), (4, 4)], 0.5, 1)
        assert nms([a, b]) == [b]

    def test_properties_on_random_fields(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            cands = decode(random_field(rng), 1e-4)
            kept = nms(cands, 0.7)
            assert all(k in cands for k in kept)
            scores = [k.score for k in kept]
            assert scores == sorted(scores, reverse=True)
            assert nms(kept, 0.7) == kept


class TestOKS:
    def test_exact(self):
        gt = person([(3, 4), (7, 1)])
        assert oks(gt.keypoints, gt, SkeletonSpec(("a", "b"), (0.1, 0.1))) == 1.0

    def test_one_sigma(self):
        gt = person([(0, 0)], (0, 0, 10, 10))
        # d^2 = 2 * area * kappa^2 = 2 * 100 * 0.01 = 2
        assert oks(KeypointSet([(1, 1)]), gt, ONE) == pytest.approx(math.exp(-1), rel=1e-15)
        assert oks(KeypointSet([(1, 1)]), gt, ONE) == pytest.approx(0.367879, abs=1e-6)

    def test_far_away(self):
        gt = person([(0, 0)], (0, 0, 10, 10))
        s = math.sqrt(gt.area)
        assert oks(KeypointSet([(100 * s * 0.1, 0)]), gt, ONE) <= 1e-12

    def test_needs_visible_keypoint(self):
        gt = PersonAnnotation(KeypointSet([(0, 0)], [False]), (0, 0, 1, 1))
        with pytest.raises(ValueError):
            oks(KeypointSet([(0, 0)]), gt, ONE)

    def test_unlabeled_keypoints_ignored(self):
        sk = SkeletonSpec(("a", "b"), (0.1, 0.1))
        gt = PersonAnnotation(KeypointSet([(0, 0), (5, 5)], [True, False]), (0, 0, 10, 10))
        assert oks(KeypointSet([(0, 0), (99, 99)]), gt, sk) == 1.0

    @settings(max_examples=50, deadline=None)
    @given(st.floats(-50, 50), st.floats(-50, 50), st.floats(0.25, 8))
    def test_translation_and_scale_invariance(self, dx, dy, c):
        rng = np.random.default_rng(7)
        g = rng.uniform(10, 40, size=(5, 2))
        p = g + rng.normal(0, 2, size=g.shape)
        box = np.array([5.0, 5.0, 45.0, 45.0])
        base = oks(KeypointSet(p), PersonAnnotation(KeypointSet(g), tuple(box)), SYNTH_SKELETON)
        shift = np.array([dx, dy])
        moved = oks(KeypointSet(p + shift), PersonAnnotation(KeypointSet(g + shift), tuple(box + np.tile(shift, 2))),
                    SYNTH_SKELETON)
        scaled = oks(KeypointSet(p * c), PersonAnnotation(KeypointSet(g * c), tuple(box * c)), SYNTH_SKELETON)
        assert moved == pytest.approx(base, rel=1e-9)
        assert scaled == pytest.approx(base, rel=1e-9)


def brute_force_tp(oks_m, thr):
    """Greedy matching is the lexicographically largest vector of matched OKS (in score order)."""
    n_pred, n_gt = oks_m.shape
    best, best_tp = None, None
    for assign in itertools.product(range(-1, n_gt), repeat=n_pred):
        used = [a for a in assign if a >= 0]
        if len(used) != len(set(used)):
            continue
        if any(a >= 0 and oks_m[i, a] < thr for i, a in enumerate(assign)):
            continue
        key = tuple(oks_m[i, a] if a >= 0 else -1.0 for i, a in enumerate(assign))
        if best is None or key > best:
            best, best_tp = key, np.array([a >= 0 for a in assign])
    return best_tp


class TestAP:
    def test_perfect_predictor(self):
        rng = np.random.default_rng(2)
        gts = [[person(rng.uniform(5, 60, size=(5, 2))) for _ in range(rng.integers(1, 4))] for _ in range(10)]
        preds = [[PosePrediction(g.keypoints, float(rng.uniform(0.01, 1)), i) for i, g in enumerate(s)] for s in gts]
        r = average_precision(preds, gts, SYNTH_SKELETON)
        assert r.ap == 1.0 and r.ap50 == 1.0 and r.ap75 == 1.0

    def test_empty_predictor(self):
        gts = [[person([(10, 10)] * 5)]]
        r = average_precision([[]], gts, SYNTH_SKELETON)
        assert r.ap == 0.0 and r.ap50 == 0.0

    def test_thresholds(self):
        assert len(OKS_THRESHOLDS) == 10
        assert OKS_THRESHOLDS[0] == 0.5 and OKS_THRESHOLDS[-1] == 0.95

    def test_greedy_matches_brute_force(self):
        rng = np.random.default_rng(3)
        for _ in range(300):
            n_pred, n_gt = rng.integers(1, 4), rng.integers(1, 3)
            m = rng.uniform(0, 1, size=(n_pred, n_gt))
            for thr in (0.3, 0.5, 0.75):
                np.testing.assert_array_equal(_match(m, thr), brute_force_tp(m, thr))

    def test_two_gts_three_preds(self):
        # hand-set OKS; rows in descending score order
        m = np.array([[0.9, 0.6], [0.8, 0.2], [0.55, 0.7]])
        np.testing.assert_array_equal(_match(m, 0.5), [True, False, True])
        np.testing.assert_array_equal(_match(m, 0.65), [True, False, True])
        np.testing.assert_array_equal(_match(m, 0.75), [True, False, False])

    def test_hand_computed_ap(self):
        # one scene, 2 gts, 3 preds at threshold 0.5: TP, FP, TP -> P=[1, .5, 2/3], R=[.5, .5, 1]
        sk = ONE
        gts = [[person([(0, 0)], (0, 0, 10, 10)), person([(50, 50)], (45, 45, 55, 55))]]
        preds = [[pose([(0, 0)], 0.9, 0), pose([(20, 20)], 0.8, 1), pose([(50, 50)], 0.7, 2)]]
        r = average_precision(preds, gts, sk, (0.5,))
        # envelope: recall <= .5 -> 1, recall in (.5, 1] -> 2/3
        assert r.ap == pytest.approx((51 * 1 + 50 * (2 / 3)) / 101, abs=1e-15)

    def test_invariant_to_reordering(self):
        rng = np.random.default_rng(4)
        gts = [[person(rng.uniform(5, 60, size=(5, 2))) for _ in range(2)] for _ in range(6)]
        preds = [[PosePrediction(KeypointSet(g.keypoints.coords + rng.normal(0, 1.5, size=(5, 2))),
                                 float(rng.uniform()), i) for i, g in enumerate(s * 2)] for s in gts]
        a = average_precision(preds, gts, SYNTH_SKELETON)
        shuffled = [list(rng.permutation(np.array(p, dtype=object))) for p in preds]
        b = average_precision(shuffled, gts, SYNTH_SKELETON)
        assert a.per_threshold == b.per_threshold
        assert 0 <= a.ap <= a.ap50 <= 1

    def test_misaligned_inputs(self):
        with pytest.raises(ValueError):
            average_precision([[]], [], SYNTH_SKELETON)


def test_predict_is_reproducible():
    rng = np.random.default_rng(5)
    f = random_field(rng)
    a, b = predict(f), predict(f)
    assert [(p.index, p.score) for p in a] == [(p.index, p.score) for p in b]


def test_duplicate_rate():
    gts = [[person([(0, 0)], (0, 0, 10, 10)), person([(50, 50)], (45, 45, 55, 55))]]
    dup = [[pose([(0, 0)], 0.9, 0), pose([(0.5, 0)], 0.8, 1), pose([(50, 50)], 0.7, 2)]]
    assert duplicate_rate(dup, gts, ONE) == pytest.approx(1 / 3)
    clean = [[pose([(0, 0)], 0.9, 0), pose([(50, 50)], 0.7, 2), pose([(30, 30)], 0.6, 3)]]
    assert duplicate_rate(clean, gts, ONE) == 0.0
    # averaged per scene, not pooled over predictions
    two = [dup[0], [pose([(50, 50)], 0.9, 0)]]
    assert duplicate_rate(two, gts + gts, ONE) == pytest.approx((1 / 3 + 0) / 2)
    assert duplicate_rate([[]], gts, ONE) == 0.0


def test_csv_outputs(tmp_path):
    gts = [[person([(0, 0)], (0, 0, 10, 10))]]
    r = average_precision([[pose([(0, 0)], 0.9)]], gts, ONE)
    write_metrics_csv(tmp_path / "m.csv", r)
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "metric,value" and lines[1] == "AP,1.0"
    write_pr_csv(tmp_path / "pr.csv", r)
    lines = (tmp_path / "pr.csv").read_text().splitlines()
    assert lines[0] == "threshold,recall,precision" and lines[1] == "0.50,1.0,1.0"
