import itertools
import math

import mpmath
import numpy as np
import pytest

from mixpose import autodiff as ad
from mixpose.density import ComponentKind, mixture_log_likelihood, responsibilities
from mixpose.rkg import (Targets, append_auxiliary_center, full_nll_loss, group_nll, group_nll_composed,
                         group_nll_loss, heuristic_partition, partition_hash, sample_partition,
                         write_training_log)
from mixpose.types import (COCO_SKELETON, SYNTH_SKELETON, GroupPartition, KeypointSet, MixtureField,
                           PersonAnnotation, SkeletonSpec, full_partition)

mpmath.mp.dps = 50


def random_field(rng, M, K_total, spread=3.0):
    return MixtureField(rng.uniform(-spread, spread, size=(M, 2 * K_total)),
                        rng.uniform(0.5, 2.5, size=(M, 2 * K_total)), rng.uniform(0.05, 1, size=M))


class TestAuxiliaryCenter:
    def test_midpoint(self):
        ann = PersonAnnotation(KeypointSet([(1, 1)]), (0, 0, 10, 20))
        kp = append_auxiliary_center(ann)
        assert kp.K == 2
        assert tuple(kp.coords[1]) == (5, 10)
        assert kp.visibility.tolist() == [True, True]
        assert tuple(kp.coords[0]) == (1, 1)

    def test_degenerate_box(self):
        ann = PersonAnnotation(KeypointSet([(3, 3)]), (3, 3, 3, 3))
        assert tuple(append_auxiliary_center(ann).coords[1]) == (3, 3)

    def test_coco_layout(self):
        ann = PersonAnnotation(KeypointSet(np.ones((17, 2))), (0, 0, 2, 2))
        K_total = append_auxiliary_center(ann).K
        assert K_total == 18 == COCO_SKELETON.K_total
        assert sample_partition(K_total, 3, np.random.default_rng(0)).N_g == 6


class TestPartitions:
    def test_default_coco_grouping(self):
        p = sample_partition(18, 3, np.random.default_rng(1))
        assert (p.N_g, p.K_g) == (6, 3)
        assert sorted(i for g in p for i in g) == list(range(18))

    def test_single_group(self):
        p = sample_partition(18, 18, np.random.default_rng(1))
        assert p.N_g == 1 and sorted(p.groups[0]) == list(range(18))

    def test_divisibility(self):
        with pytest.raises(ValueError):
            sample_partition(18, 4, np.random.default_rng(0))

    def test_deterministic_given_rng_state(self):
        a = [sample_partition(18, 3, np.random.default_rng(7)) for _ in range(2)]
        assert a[0] == a[1]

    def test_pair_cooccurrence_frequency(self):
        rng = np.random.default_rng(2024)
        counts = np.zeros((18, 18))
        n = 10_000
        for _ in range(n):
            for g in sample_partition(18, 3, rng):
                for i, j in itertools.combinations(g, 2):
                    counts[i, j] += 1
                    counts[j, i] += 1
        freq = counts[np.triu_indices(18, 1)] / n
        assert np.all(np.abs(freq - 2 / 17) <= 0.01)

    def test_heuristic_coco(self):
        p = heuristic_partition(COCO_SKELETON)
        assert (p.N_g, p.K_g) == (6, 3)
        assert p == heuristic_partition(COCO_SKELETON)
        names = COCO_SKELETON.names + ("center",)
        assert {names[i] for i in p.groups[0]} == {"left_shoulder", "left_elbow", "left_wrist"}

    def test_heuristic_synthetic(self):
        p = heuristic_partition(SYNTH_SKELETON)
        assert (p.N_g, p.K_g) == (2, 3)

    def test_heuristic_needs_preset(self):
        with pytest.raises(ValueError):
            heuristic_partition(SkeletonSpec(("a", "b"), (0.1, 0.1)))

    def test_hash_distinguishes_partitions(self):
        a = GroupPartition(((0, 1), (2, 3)))
        b = GroupPartition(((0, 2), (1, 3)))
        assert partition_hash(a) != partition_hash(b)
        assert partition_hash(a) == partition_hash(GroupPartition(((0, 1), (2, 3))))


class TestLosses:
    def test_two_dims_at_peak(self):
        f = MixtureField(np.zeros((1, 2)), np.ones((1, 2)), [0.5])
        assert full_nll_loss(f, [np.zeros(2)]) == pytest.approx(-2 * math.log(0.5), abs=1e-15)
        assert full_nll_loss(f, [np.zeros(2)]) == pytest.approx(1.386294, abs=1e-6)

    def test_sum_over_persons(self):
        rng = np.random.default_rng(0)
        f = random_field(rng, 4, 2)
        gt = rng.normal(size=4)
        assert full_nll_loss(f, [gt, gt]) == 2 * full_nll_loss(f, [gt])

    def test_full_nll_extended_precision(self):
        rng = np.random.default_rng(3)
        f = random_field(rng, 3, 2)
        gts = [rng.uniform(-3, 3, size=4) for _ in range(2)]
        total = mpmath.mpf(0)
        for gt in gts:
            s = mpmath.mpf(0)
            for m in range(3):
                dens = mpmath.mpf(1)
                for d in range(4):
                    g = mpmath.mpf(f.gamma[m, d])
                    dens *= mpmath.exp(-abs(mpmath.mpf(gt[d]) - mpmath.mpf(f.mu[m, d])) / g) / (2 * g)
                s += mpmath.mpf(f.o[m]) / mpmath.fsum(map(mpmath.mpf, f.o)) * dens
            total -= mpmath.log(s)
        assert full_nll_loss(f, gts) == pytest.approx(float(total), rel=1e-12)

    def test_single_group_equals_full(self):
        rng = np.random.default_rng(4)
        for kind in ComponentKind:
            f = random_field(rng, 6, 3)
            gts = [rng.normal(size=6) for _ in range(3)]
            rep = group_nll_loss(f, gts, full_partition(3), kind)
            assert abs(rep.loss - full_nll_loss(f, gts, kind)) <= 1e-12

    def test_symmetric_groups_equal(self):
        mu = np.tile([1.0, 2.0], (3, 2))
        f = MixtureField(mu, np.ones_like(mu), [0.2, 0.5, 0.3])
        rep = group_nll_loss(f, [np.tile([1.5, 1.0], 2)], GroupPartition(((0,), (1,))))
        assert rep.group_losses[0] == rep.group_losses[1]

    def test_composed_from_mixture_likelihoods(self):
        rng = np.random.default_rng(5)
        f = random_field(rng, 5, 4)
        gts = [rng.normal(size=8) for _ in range(2)]
        part = GroupPartition(((2, 0), (3, 1)))
        expected = -sum(mixture_log_likelihood(f, gt, sel) for gt in gts for sel in part.groups) / 2
        rep = group_nll_loss(f, gts, part)
        assert rep.loss == pytest.approx(expected, abs=1e-12)
        assert rep.loss == pytest.approx(np.mean(rep.group_losses), abs=1e-12)

    def test_invariant_to_group_and_member_order(self):
        rng = np.random.default_rng(6)
        f = random_field(rng, 5, 6)
        gts = [rng.normal(size=12) for _ in range(2)]
        a = group_nll_loss(f, gts, GroupPartition(((0, 1, 2), (3, 4, 5)))).loss
        b = group_nll_loss(f, gts, GroupPartition(((5, 3, 4), (2, 0, 1)))).loss
        assert abs(a - b) <= 1e-12

    def test_unlabeled_keypoints_drop_out(self):
        rng = np.random.default_rng(7)
        f = random_field(rng, 4, 2)
        seen = KeypointSet([(0.1, 0.2), (99, 99)], [True, False])
        far = KeypointSet([(0.1, 0.2), (-99, 7)], [True, False])
        part = GroupPartition(((0,), (1,)))
        assert group_nll_loss(f, [seen], part).loss == group_nll_loss(f, [far], part).loss
        assert abs(group_nll_loss(f, [seen], part).group_losses[1]) <= 1e-15

    def test_moving_mean_toward_truth_lowers_loss(self):
        rng = np.random.default_rng(8)
        for _ in range(20):
            f = random_field(rng, 4, 3)
            gts = [rng.uniform(-3, 3, size=6) for _ in range(2)]
            part = sample_partition(3, 1, rng)
            m, d = rng.integers(4), rng.integers(6)
            step = 1e-3 * np.sign(gts[0][d] - f.mu[m, d])
            mu = f.mu.copy()
            mu[m, d] += step
            g = MixtureField(mu, f.gamma, f.o)
            if np.sign(gts[1][d] - f.mu[m, d]) != np.sign(step):
                continue  # second person pulls the other way
            assert group_nll_loss(g, gts, part).loss < group_nll_loss(f, gts, part).loss
            assert full_nll_loss(g, gts) < full_nll_loss(f, gts)

    def test_finite_when_linear_space_underflows(self):
        f = MixtureField(np.zeros((4, 36)), np.full((4, 36), 0.01), np.ones(4))
        gts = [np.full(36, 0.5)]
        rep = group_nll_loss(f, gts, full_partition(18), precision="single")
        assert rep.underflow_ratio == 1.0
        assert math.isfinite(rep.loss)
        assert rep.loss == pytest.approx(-36 * (math.log(50) - 50), rel=1e-12)

    def test_partition_must_match_field(self):
        f = MixtureField(np.zeros((1, 4)), np.ones((1, 4)), [1.0])
        with pytest.raises(ValueError):
            group_nll_loss(f, [np.zeros(4)], full_partition(3))


def _batch(rng, B, M, K_total, kind_spread=4.0):
    mu = ad.Tensor(rng.uniform(-kind_spread, kind_spread, size=(B, M, 2 * K_total)), requires_grad=True)
    gamma = ad.Tensor(rng.uniform(0.5, 2.5, size=(B, M, 2 * K_total)), requires_grad=True)
    o = rng.uniform(0.05, 1, size=(B, M))
    log_pi = ad.Tensor(np.log(o / o.sum(axis=1, keepdims=True)), requires_grad=True)
    per_image = [[KeypointSet(rng.uniform(-4, 4, size=(K_total, 2))) for _ in range(rng.integers(1, 4))]
                 for _ in range(B)]
    return mu, gamma, log_pi, Targets.from_keypoints(per_image)


class TestTapeLoss:
    @pytest.mark.parametrize("kind", list(ComponentKind))
    def test_fused_matches_composed(self, kind):
        rng = np.random.default_rng(10)
        for _ in range(10):
            mu, gamma, log_pi, t = _batch(rng, 3, 5, 6)
            part = sample_partition(6, 3, rng)
            with ad.Tape() as tape:
                fused, _ = group_nll(mu, gamma, log_pi, t, part, kind)
            g1 = ad.backward(tape, fused)
            g1 = [g1[x].copy() for x in (mu, gamma, log_pi)]
            with ad.Tape() as tape:
                comp = group_nll_composed(mu, gamma, log_pi, t, part, kind)
            g2 = ad.backward(tape, comp)
            assert fused.value == pytest.approx(comp.value, abs=1e-10)
            for a, x in zip(g1, (mu, gamma, log_pi)):
                np.testing.assert_allclose(a, g2[x], rtol=0, atol=1e-8)

    def test_matches_numpy_loss(self):
        rng = np.random.default_rng(11)
        mu, gamma, log_pi, t = _batch(rng, 1, 4, 3)
        field = MixtureField(mu.value[0], gamma.value[0], np.exp(log_pi.value[0]))
        part = sample_partition(3, 1, rng)
        v, info = group_nll(mu, gamma, log_pi, t, part)
        gts = [KeypointSet(c.reshape(-1, 2)) for c in t.coords]
        rep = group_nll_loss(field, gts, part)
        assert float(v.value) == pytest.approx(rep.loss, abs=1e-12)
        np.testing.assert_allclose(info["group_losses"], rep.group_losses, atol=1e-12)

    def test_mu_gradient_is_responsibility_weighted_sign(self):
        rng = np.random.default_rng(12)
        mu, gamma, log_pi, t = _batch(rng, 1, 5, 2)
        with ad.Tape() as tape:
            v, _ = group_nll(mu, gamma, log_pi, t, full_partition(2))
        g = ad.backward(tape, v)[mu][0]
        field = MixtureField(mu.value[0], gamma.value[0], np.exp(log_pi.value[0]))
        expected = np.zeros_like(g)
        for k in t.coords:
            r = responsibilities(field, k)
            expected += r[:, None] * np.sign(field.mu - k) / field.gamma
        np.testing.assert_allclose(g, expected, rtol=0, atol=1e-8)

    def test_linear_space_agrees_without_underflow(self):
        rng = np.random.default_rng(13)
        mu, gamma, log_pi, t = _batch(rng, 2, 4, 3)
        part = sample_partition(3, 3, rng)
        a, _ = group_nll(mu, gamma, log_pi, t, part)
        b, _ = group_nll(mu, gamma, log_pi, t, part, space="linear", precision="double")
        assert float(a.value) == pytest.approx(float(b.value), rel=1e-12)

    def test_linear_single_precision_overflows_to_inf(self):
        mu = ad.Tensor(np.zeros((1, 2, 36)), requires_grad=True)
        gamma = ad.Tensor(np.full((1, 2, 36), 0.01), requires_grad=True)
        log_pi = ad.Tensor(np.log(np.full((1, 2), 0.5)), requires_grad=True)
        t = Targets.from_keypoints([[KeypointSet(np.full((18, 2), 0.5))]])
        v, info = group_nll(mu, gamma, log_pi, t, full_partition(18), space="linear", precision="single")
        assert float(v.value) == math.inf
        assert info["underflow_ratio"] == 1.0
        w, _ = group_nll(mu, gamma, log_pi, t, full_partition(18))
        assert math.isfinite(float(w.value))


def test_training_log_csv(tmp_path):
    p = tmp_path / "log.csv"
    write_training_log(p, [(0, 1.5, 0.0, "abc")])
    assert p.read_text().splitlines() == ["iter,loss,underflow_ratio,partition_hash", "0,1.5,0.0,abc"]
