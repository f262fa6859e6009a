import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats

from alquery.metrics import (
    DegenerateFit,
    SeedMismatch,
    TooFewCycles,
    TrajectoryRecord,
    aggregate_mean_ci,
    aubc,
    average_ranks,
    decay_curve,
    delta_from_effect_size,
    dice,
    effect_size_from_delta,
    fg_eff,
    friedman_nemenyi,
    golden_section,
    holm_divisor,
    holm_reject,
    paired_test,
    ppm,
    studentized_range_sf,
)


class TestDice:
    def test_identical(self):
        lab = np.random.default_rng(0).integers(0, 3, (5, 5, 5))
        per, mean = dice(lab, lab, 2)
        assert np.all(per == 1.0) and mean == 1.0

    def test_half(self):
        a = np.zeros(16, int)
        b = np.zeros(16, int)
        a[:8] = 1
        b[4:12] = 1
        per, _ = dice(a, b, 1)
        assert per[0] == 0.5

    def test_gt_only_and_absent(self):
        gt = np.array([0, 1, 1, 0])
        pred = np.array([0, 0, 0, 0])
        per, mean = dice(pred, gt, 2)
        assert per[0] == 0.0 and math.isnan(per[1]) and mean == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            dice(np.zeros(3, int), np.zeros(4, int), 1)


class TestAubc:
    @pytest.mark.parametrize("y,expected", [([0.5, 0.5, 0.5], 0.5), ([0, 1], 0.5), ([0.2, 0.4, 0.9], 0.475)])
    def test_examples(self, y, expected):
        assert abs(aubc(y) - expected) < 1e-12

    @given(st.floats(0, 1), st.integers(2, 20))
    def test_constant(self, c, n):
        assert aubc([c] * n) == pytest.approx(c, rel=1e-15, abs=1e-300)

    def test_too_few(self):
        with pytest.raises(TooFewCycles):
            aubc([0.3])


class TestFgEff:
    @pytest.mark.parametrize("gamma", [0.1, 1.0, 5.0, 50.0])
    def test_round_trip(self, gamma):
        t = np.array([0.01, 0.05, 0.1, 0.2, 0.35])
        y = decay_curve(t, gamma, 0.3, 0.85, t[0])
        fit = fg_eff(t, y, 0.85)
        assert abs(fit.gamma - gamma) < 1e-6
        assert fit.residual >= 0
        assert np.allclose(fit.predict(t), y, atol=1e-9)

    def test_flat(self):
        with pytest.raises(DegenerateFit):
            fg_eff([0.1, 0.2, 0.3], [0.7, 0.7, 0.7], 0.7)

    def test_needs_three_cycles(self):
        with pytest.raises(TooFewCycles):
            fg_eff([0.1, 0.2], [0.5, 0.6], 0.9)

    def test_golden_section(self):
        assert golden_section(lambda x: (x - 1.234) ** 2, -5, 5, 1e-12) == pytest.approx(1.234, abs=1e-9)


def rec(method, setting, seed, dice_curve):
    n = len(dice_curve)
    return TrajectoryRecord(method, setting, seed, list(range(10, 10 * n + 1, 10)), [0] * n, list(dice_curve))


class TestPairedTest:
    def test_reference_example(self):
        a = [0.90, 0.91, 0.89, 0.90]
        b = [0.50, 0.52, 0.49, 0.51]
        diff, p = paired_test(a, b)
        # t = 136.8320..., p = 8.60645e-7 from a 40-digit incomplete-beta evaluation
        assert diff == pytest.approx(0.395, abs=1e-12)
        assert p == pytest.approx(8.606450823237107e-07, rel=1e-6)

    def test_zero_variance_is_tie(self):
        _, p = paired_test([0.5, 0.6, 0.7], [0.4, 0.5, 0.6])
        assert math.isnan(p)

    def test_needs_two(self):
        with pytest.raises(SeedMismatch):
            paired_test([0.1], [0.2])


class TestPpm:
    def test_strict_dominance(self):
        rng = np.random.default_rng(0)
        recs = []
        for seed in range(4):
            base = rng.random(5) * 0.1
            recs.append(rec("A", "s", seed, base + 0.8 + rng.random(5) * 0.01))
            recs.append(rec("B", "s", seed, base + 0.2 + rng.random(5) * 0.01))
        pm = ppm(recs)
        i, j = pm.methods.index("A"), pm.methods.index("B")
        assert pm.win[i, j] == 100.0 and pm.win[j, i] == 0.0
        assert pm.mean_row[j] == 100.0 and pm.mean_row[i] == 0.0

    def test_identical_is_tie(self):
        recs = [rec(m, "s", s, [0.1 * s, 0.2, 0.3]) for m in ("A", "B") for s in range(3)]
        assert np.all(ppm(recs).win == 0)

    @given(st.integers(0, 10_000), st.integers(2, 5), st.integers(2, 5))
    def test_antisymmetry_and_holm_subset(self, seed, k, seeds):
        rng = np.random.default_rng(seed)
        methods = [f"m{i}" for i in range(k)]
        recs = []
        for setting in ("x", "y"):
            offs = rng.normal(0, 0.05, k)
            for s in range(seeds):
                for m, off in zip(methods, offs):
                    recs.append(rec(m, setting, s, 0.5 + off + rng.normal(0, 0.02, 4)))
        raw = ppm(recs, p=0.05)
        holm = ppm(recs, p=0.05, correction="holm")
        assert np.all(np.diag(raw.win) == 0)
        assert np.array_equal(raw.loss, raw.win.T)
        # per cell, each comparison is a win, a loss or a tie; never both
        assert np.all(raw.win + raw.win.T <= 100.0 + 1e-9)
        assert np.all(holm.win <= raw.win + 1e-12)
        assert np.all(ppm(recs, p=0.02).win <= raw.win + 1e-12)

    def test_seed_mismatch(self):
        recs = [rec("A", "s", 0, [0.1, 0.2]), rec("A", "s", 1, [0.1, 0.2]),
                rec("B", "s", 0, [0.1, 0.2]), rec("B", "s", 2, [0.1, 0.2])]
        with pytest.raises(SeedMismatch):
            ppm(recs)

    def test_bad_budgets(self):
        with pytest.raises(ValueError):
            TrajectoryRecord("A", "s", 0, [10, 10], [0, 0], [0.1, 0.2])


class TestHolm:
    def test_divisor(self):
        assert holm_divisor(9, 5) == 180

    def test_step_down(self):
        p = [0.01, 0.04, 0.03, 0.005]
        # sorted: 0.005 <= 0.05/4, 0.01 <= 0.05/3, 0.03 > 0.05/2 stops
        assert holm_reject(p, 0.05).tolist() == [True, False, False, True]

    def test_nan_never_rejected(self):
        assert holm_reject([float("nan"), 0.001], 0.05).tolist() == [False, True]

    @given(st.lists(st.floats(0, 1), min_size=1, max_size=30), st.floats(0.001, 0.2))
    def test_subset_of_uncorrected(self, p, alpha):
        rej = holm_reject(p, alpha)
        assert np.all(np.asarray(p)[rej] <= alpha)


class TestNemenyi:
    @pytest.mark.parametrize("r,delta", [(0.1, 0.387), (0.3, 1.162), (0.5, 1.936)])
    def test_effect_size_anchors(self, r, delta):
        assert abs(delta_from_effect_size(r, 9, 24) - delta) < 0.005
        assert effect_size_from_delta(delta_from_effect_size(r, 9, 24), 9, 24) == pytest.approx(r, abs=1e-12)

    def test_anchor_identity(self):
        # with k = 9 the N cancels: delta = r * sqrt(15)
        for N in (5, 24, 100):
            assert delta_from_effect_size(0.3, 9, N) == pytest.approx(0.3 * math.sqrt(15), abs=1e-12)

    @pytest.mark.parametrize("k", [2, 3, 9])
    def test_monte_carlo_tail_matches_scipy(self, k):
        q = np.array([1.0, 2.0, 3.0, 4.0, 5.0])
        mc = studentized_range_sf(q, k)
        ref = stats.studentized_range.sf(q, k, 1e4)
        assert np.all(np.abs(mc - ref) < 3e-3)

    def test_monte_carlo_reproducible(self):
        a = studentized_range_sf(np.array([2.5, 3.1]), 5, n_samples=20_000, seed=1)
        b = studentized_range_sf(np.array([2.5, 3.1]), 5, n_samples=20_000, seed=1)
        assert np.array_equal(a, b)

    @given(st.integers(0, 10_000), st.integers(2, 8), st.integers(2, 10))
    def test_rank_sums(self, seed, k, N):
        scores = np.random.default_rng(seed).integers(0, 4, (N, k)).astype(float)
        ranks = average_ranks(scores)
        assert np.allclose(ranks.sum(axis=1), k * (k + 1) / 2)

    def test_friedman_against_scipy(self):
        rng = np.random.default_rng(4)
        scores = rng.random((12, 4)) + np.array([0.0, 0.1, 0.3, 0.31])
        fn = friedman_nemenyi(scores, list("abcd"), n_samples=200_000)
        ref = stats.friedmanchisquare(*scores.T)
        assert fn.statistic == pytest.approx(ref.statistic, rel=1e-12)
        assert fn.pvalue == pytest.approx(ref.pvalue, rel=1e-9)
        assert np.allclose(fn.nemenyi_p, fn.nemenyi_p.T)
        assert np.all(np.diag(fn.nemenyi_p) == 1.0)

    def test_friedman_ties(self):
        scores = np.array([[1, 1, 2], [1, 2, 2], [3, 1, 1], [2, 2, 2]], dtype=float)
        fn = friedman_nemenyi(scores, list("abc"), n_samples=10_000)
        ref = stats.friedmanchisquare(*scores.T)
        assert fn.statistic == pytest.approx(ref.statistic, rel=1e-12)

    def test_groups_cover_methods(self):
        scores = np.tile([0.9, 0.89, 0.5, 0.1], (10, 1)) + np.random.default_rng(0).normal(0, 0.005, (10, 4))
        fn = friedman_nemenyi(scores, list("abcd"), n_samples=100_000)
        assert {m for g in fn.groups for m in g} == set("abcd")
        assert ["a", "b"] in fn.groups or ["b", "a"] in fn.groups
        assert not any("a" in g and "d" in g for g in fn.groups)


class TestAggregate:
    def test_example(self):
        mu, se, hw = aggregate_mean_ci([60, 70], [2, 2], 4)
        assert mu == 65.0
        assert se == pytest.approx(0.7071067811865476, abs=1e-12)
        assert hw == pytest.approx(1.3859292911256331, abs=1e-12)

    def test_single_setting(self):
        mu, se, _ = aggregate_mean_ci([50], [3], 9)
        assert mu == 50 and se == pytest.approx(1.0)

    def test_zero_spread(self):
        assert aggregate_mean_ci([1, 2, 3], [0, 0, 0], 4)[2] == 0.0
