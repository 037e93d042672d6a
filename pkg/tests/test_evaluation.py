from fractions import Fraction
from itertools import product

import numpy as np
import pytest
from numpy.testing import assert_allclose

from koafusion.cohort import SubjectRecord
from koafusion.errors import ContractViolation, UndefinedMetric
from koafusion.evaluation import (
    FUSION_TABLE,
    FUSION_TABLE_HORIZONS,
    MetricEstimate,
    RankingTable,
    average_precision,
    calibrated_ap,
    paired_permutation_test,
    rank_settings,
    reference_ranking_table,
    roc_auc,
    stratified_bootstrap,
    subgroup_report,
)


def pairwise_auc(scores, labels):
    """O(n^2) Mann-Whitney oracle: wins plus half-ties over all pairs."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    pos = s[y == 1]
    neg = s[y == 0]
    total = 0.0
    for a in pos:
        for b in neg:
            if a > b:
                total += 1.0
            elif a == b:
                total += 0.5
    return total / (pos.size * neg.size)


def threshold_loop_ap(scores, labels):
    """Independent AP oracle: recompute tp/fp from scratch per threshold."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    p = y.sum()
    ap = 0.0
    prev_recall = 0.0
    for t in sorted(set(s), reverse=True):
        keep = s >= t
        tp = int(y[keep].sum())
        fp = int(keep.sum()) - tp
        recall = tp / p
        ap += (recall - prev_recall) * (tp / (tp + fp))
        prev_recall = recall
    return ap


class TestRocAuc:
    @pytest.mark.parametrize("seed", range(10))
    def test_bitwise_equal_to_pairwise_oracle(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(8, 40))
        scores = np.round(rng.random(n), 1)  # coarse grid forces ties
        labels = rng.integers(0, 2, size=n)
        if labels.sum() in (0, n):
            labels[0] = 1 - labels[0]
        assert roc_auc(scores, labels) == pairwise_auc(scores, labels)

    def test_extremes(self):
        assert roc_auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
        assert roc_auc([0.9, 0.8, 0.2, 0.1], [0, 0, 1, 1]) == 0.0
        assert roc_auc([0.5, 0.5, 0.5, 0.5], [0, 1, 0, 1]) == 0.5

    def test_invariant_to_monotone_transform(self):
        rng = np.random.default_rng(1)
        s = rng.random(30)
        y = rng.integers(0, 2, size=30)
        y[0], y[1] = 0, 1
        assert roc_auc(s, y) == roc_auc(np.exp(3 * s), y)

    def test_single_class_undefined(self):
        with pytest.raises(UndefinedMetric):
            roc_auc([0.1, 0.2], [1, 1])

    def test_contracts(self):
        with pytest.raises(ContractViolation):
            roc_auc([0.1, np.nan], [0, 1])
        with pytest.raises(ContractViolation):
            roc_auc([0.1, 0.2], [0, 2])
        with pytest.raises(ContractViolation):
            roc_auc([0.1, 0.2, 0.3], [0, 1])
        with pytest.raises(ContractViolation):
            roc_auc([], [])


class TestAveragePrecision:
    def test_hand_worked_case(self):
        ap = average_precision([0.9, 0.8, 0.7, 0.6], [1, 0, 1, 0])
        assert_allclose(ap, 0.5 * 1.0 + 0.5 * (2.0 / 3.0), rtol=1e-15)

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_threshold_loop_oracle(self, seed):
        rng = np.random.default_rng(100 + seed)
        n = int(rng.integers(6, 50))
        scores = np.round(rng.random(n), 1)
        labels = rng.integers(0, 2, size=n)
        if labels.sum() in (0, n):
            labels[0] = 1 - labels[0]
        assert_allclose(
            average_precision(scores, labels),
            threshold_loop_ap(scores, labels),
            rtol=1e-13,
        )

    @pytest.mark.parametrize("n,p", [(10, 3), (7, 1), (12, 6), (9, 8)])
    def test_constant_scores_give_exact_prevalence(self, n, p):
        labels = np.zeros(n, dtype=int)
        labels[:p] = 1
        got = average_precision(np.full(n, 0.37), labels)
        assert got == float(Fraction(p, n))

    def test_perfect_ranking(self):
        assert average_precision([0.9, 0.8, 0.1, 0.2], [1, 1, 0, 0]) == 1.0

    def test_single_class_undefined(self):
        with pytest.raises(UndefinedMetric):
            average_precision([0.3, 0.4], [0, 0])


class TestCalibratedAp:
    def test_frozen_three_point_case(self):
        got = calibrated_ap([0.9, 0.6, 0.4], [1, 0, 1], target_prevalence=0.15)
        assert_allclose(got, 0.575, rtol=1e-15)

    @pytest.mark.parametrize("seed", range(6))
    def test_reduces_to_ap_at_native_prevalence(self, seed):
        rng = np.random.default_rng(seed)
        n = 24
        scores = np.round(rng.random(n), 1)
        labels = rng.integers(0, 2, size=n)
        if labels.sum() in (0, n):
            labels[0] = 1 - labels[0]
        pi = labels.mean()
        assert_allclose(
            calibrated_ap(scores, labels, pi),
            average_precision(scores, labels),
            rtol=1e-12,
        )

    def test_lower_target_prevalence_lowers_score(self):
        rng = np.random.default_rng(7)
        scores = rng.random(40)
        labels = (scores + rng.normal(0, 0.3, 40) > 0.5).astype(int)
        hi = calibrated_ap(scores, labels, 0.5)
        lo = calibrated_ap(scores, labels, 0.05)
        assert lo < hi

    def test_target_prevalence_bounds(self):
        for bad in (0.0, 1.0, -0.2, 1.5):
            with pytest.raises(ContractViolation):
                calibrated_ap([0.1, 0.9], [0, 1], bad)


class TestStratifiedBootstrap:
    def test_class_counts_preserved_every_iteration(self):
        rng = np.random.default_rng(0)
        scores = rng.random(30)
        labels = np.array([1] * 9 + [0] * 21)

        def counting_metric(s, y):
            assert y.sum() == 9 and y.size == 30
            return float(y.mean())

        est = stratified_bootstrap(counting_metric, scores, labels, n_boot=50)
        assert est.point == 0.3
        assert_allclose(est.boot_mean, 0.3, rtol=1e-14)
        assert_allclose(est.boot_se, 0.0, atol=1e-15)

    def test_replicate_stream_is_prefix_stable(self):
        rng = np.random.default_rng(1)
        scores = rng.random(40)
        labels = rng.integers(0, 2, size=40)
        labels[:2] = [0, 1]
        a = stratified_bootstrap(roc_auc, scores, labels, n_boot=10, seed=5, keep_samples=True)
        b = stratified_bootstrap(roc_auc, scores, labels, n_boot=25, seed=5, keep_samples=True)
        assert_allclose(a.samples, b.samples[:10], rtol=0, atol=0)

    def test_point_and_spread(self):
        rng = np.random.default_rng(2)
        scores = rng.random(60)
        labels = (scores + rng.normal(0, 0.5, 60) > 0.5).astype(int)
        labels[:2] = [0, 1]
        est = stratified_bootstrap(roc_auc, scores, labels, n_boot=200, seed=0)
        assert est.point == roc_auc(scores, labels)
        assert est.boot_se > 0
        assert abs(est.boot_mean - est.point) < 5 * est.boot_se
        assert est.n_boot == 200 and est.samples is None

    def test_contracts(self):
        with pytest.raises(ContractViolation):
            stratified_bootstrap(roc_auc, [0.1, 0.9], [0, 1], n_boot=1)
        with pytest.raises(UndefinedMetric):
            stratified_bootstrap(roc_auc, [0.1, 0.9], [1, 1], n_boot=10)


class TestPairedPermutation:
    def test_exact_enumeration_matches_independent_loop(self):
        rng = np.random.default_rng(3)
        n = 6
        sa = rng.random(n)
        sb = rng.random(n)
        labels = np.array([0, 1, 0, 1, 1, 0])
        res = paired_permutation_test(roc_auc, sa, sb, labels)
        delta = roc_auc(sa, labels) - roc_auc(sb, labels)
        hits = 0
        for pattern in product([False, True], repeat=n):
            mask = np.array(pattern)
            pa = np.where(mask, sb, sa)
            pb = np.where(mask, sa, sb)
            if roc_auc(pa, labels) - roc_auc(pb, labels) >= delta:
                hits += 1
        assert res.exact and res.n_used == 2**n
        assert res.p_value == hits / 2**n
        assert_allclose(res.delta, delta, rtol=0, atol=0)

    def test_identical_models_have_p_one(self):
        rng = np.random.default_rng(4)
        s = rng.random(8)
        y = np.array([0, 1] * 4)
        res = paired_permutation_test(roc_auc, s, s.copy(), y)
        assert res.exact and res.p_value == 1.0 and res.delta == 0.0
        s20 = rng.random(20)
        y20 = np.array([0, 1] * 10)
        res20 = paired_permutation_test(roc_auc, s20, s20.copy(), y20, n_iter=99, seed=0)
        assert not res20.exact and res20.n_used == 99
        assert res20.p_value == 1.0

    def test_dominant_model_gets_small_p(self):
        y = np.array([0, 1] * 5)
        strong = np.where(y == 1, 0.9, 0.1) + np.linspace(0, 0.01, 10)
        weak = np.where(y == 1, 0.1, 0.9) + np.linspace(0, 0.01, 10)
        res = paired_permutation_test(roc_auc, strong, weak, y)
        assert res.exact and res.p_value < 0.01
        rev = paired_permutation_test(roc_auc, weak, strong, y)
        assert rev.p_value > 0.99

    def test_sampled_p_uses_add_one_smoothing(self):
        rng = np.random.default_rng(5)
        y = np.array([0, 1] * 8)
        strong = np.where(y == 1, 0.9, 0.1) + rng.normal(0, 0.01, 16)
        weak = rng.random(16)
        res = paired_permutation_test(roc_auc, strong, weak, y, n_iter=200, seed=1)
        assert not res.exact
        assert res.p_value >= 1.0 / 201.0  # never exactly zero

    def test_misaligned_inputs_rejected(self):
        with pytest.raises(ContractViolation):
            paired_permutation_test(roc_auc, [0.1, 0.2], [0.1], [0, 1])


def rank_column(values):
    """Independent average-rank helper: rank 1 for the highest value."""
    order = sorted(range(len(values)), key=lambda i: -values[i])
    ranks = [0.0] * len(values)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and values[order[j + 1]] == values[order[i]]:
            j += 1
        for k in range(i, j + 1):
            ranks[order[k]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


class TestRankSettings:
    def test_small_table(self):
        table = RankingTable(
            settings=("A", "B", "C"),
            metrics=("m",),
            horizons=(1, 2),
            values={
                "A": {"m": [0.9, 0.5]},
                "B": {"m": [0.8, 0.7]},
                "C": {"m": [0.7, 0.6]},
            },
        )
        res = rank_settings(table)
        assert res.totals == {"A": 1 + 3, "B": 2 + 1, "C": 3 + 2}
        assert res.winner == "B" and not res.tied
        assert res.cell_ranks[("A", "m", 1)] == 1.0

    def test_tie_breaks_lexicographically_and_flags(self):
        table = RankingTable(
            settings=("B", "A"),
            metrics=("m",),
            horizons=(1,),
            values={"A": {"m": [0.5]}, "B": {"m": [0.5]}},
        )
        res = rank_settings(table)
        assert res.tied and res.winner == "A"
        assert res.totals == {"A": 1.5, "B": 1.5}

    def test_reference_table_winner_and_total(self):
        res = rank_settings(reference_ranking_table())
        assert res.winner == "F8"
        assert not res.tied
        assert_allclose(res.totals["F8"], 29.5, rtol=0, atol=0)

    def test_reference_totals_match_independent_ranker(self):
        settings = sorted(FUSION_TABLE)
        totals = {s: 0.0 for s in settings}
        for metric in ("roc_auc", "average_precision"):
            for h_idx in range(len(FUSION_TABLE_HORIZONS)):
                col = [FUSION_TABLE[s][metric][h_idx] for s in settings]
                for s, r in zip(settings, rank_column(col)):
                    totals[s] += r
        res = rank_settings(reference_ranking_table())
        assert res.totals == totals
        assert min(totals, key=lambda s: (totals[s], s)) == "F8"

    def test_validation(self):
        with pytest.raises(ContractViolation):
            RankingTable(settings=("A",), metrics=("m",), horizons=(1,), values={})
        with pytest.raises(ContractViolation):
            RankingTable(
                settings=("A",), metrics=("m",), horizons=(1, 2),
                values={"A": {"m": [0.5]}},
            )
        bad = RankingTable(
            settings=("A",), metrics=("m",), horizons=(1,),
            values={"A": {"m": [np.nan]}},
        )
        with pytest.raises(ContractViolation):
            rank_settings(bad)


def make_record(sid, injury=False, surgery=False, womac=5.0, klg0=2):
    return SubjectRecord(
        subject_id=sid, age=60.0, sex="F", bmi=27.0, womac_total=womac,
        prior_injury=injury, prior_surgery=surgery, site="A",
        klg_by_visit={0: klg0},
    )


class TestSubgroupReport:
    def test_groups_and_averaging(self):
        records = {
            "a": make_record("a", surgery=True, injury=True, womac=20.0, klg0=0),
            "b": make_record("b", injury=True, womac=5.0, klg0=2),
            "c": make_record("c", womac=12.0, klg0=3),
            "d": make_record("d", womac=10.0, klg0=1),
            "e": make_record("e", womac=30.0, klg0=4),
        }
        ids = ["a", "b", "c", "d", "e"]
        labels = [1, 0, 1, 0, 1]
        per_horizon = {
            12: (ids, [0.9, 0.1, 0.8, 0.2, 0.7], labels),
            24: (ids, [0.7, 0.3, 0.9, 0.1, 0.8], labels),
        }
        report = subgroup_report(records, per_horizon)
        trauma = report["trauma"]
        assert trauma["prior_surgery"]["n"] == 1
        assert trauma["injury_no_surgery"]["n"] == 1
        assert trauma["no_trauma"]["n"] == 3
        # grade 4 at baseline is dropped from the KLG family only
        assert set(report["baseline_klg"]) == {"klg_0_1", "klg_2", "klg_3"}
        assert report["baseline_klg"]["klg_0_1"]["n"] == 2
        assert report["symptoms"]["symptomatic"]["n"] == 3
        assert report["symptoms"]["asymptomatic"]["n"] == 2
        grp = report["symptoms"]["symptomatic"]  # a, c, e: labels 1, 1, 1 -> undefined
        assert grp["roc_auc"] is None and grp["average_precision"] is None
        asym = report["symptoms"]["asymptomatic"]  # b, d: labels 0, 0 -> undefined
        assert asym["roc_auc"] is None

    def test_metric_is_horizon_average(self):
        records = {i: make_record(i) for i in ["a", "b", "c", "d"]}
        ids = ["a", "b", "c", "d"]
        labels = [1, 0, 1, 0]
        s12 = [0.9, 0.1, 0.8, 0.2]
        s24 = [0.2, 0.8, 0.9, 0.1]
        report = subgroup_report(records, {12: (ids, s12, labels), 24: (ids, s24, labels)})
        got = report["trauma"]["no_trauma"]["roc_auc"]
        want = (roc_auc(s12, labels) + roc_auc(s24, labels)) / 2.0
        assert_allclose(got, want, rtol=1e-15)

    def test_only_common_ids_used(self):
        records = {i: make_record(i) for i in ["a", "b", "c", "d"]}
        per_horizon = {
            12: (["a", "b", "c", "d"], [0.9, 0.1, 0.8, 0.2], [1, 0, 1, 0]),
            24: (["a", "b", "c"], [0.9, 0.1, 0.8], [1, 0, 1]),
        }
        report = subgroup_report(records, per_horizon)
        assert report["trauma"]["no_trauma"]["n"] == 3

    def test_contracts(self):
        records = {"a": make_record("a")}
        with pytest.raises(ContractViolation):
            subgroup_report(records, {})
        with pytest.raises(ContractViolation):
            subgroup_report(records, {12: (["a"], [0.5, 0.6], [1])})
        with pytest.raises(ContractViolation):
            subgroup_report(
                records,
                {12: (["a"], [0.5], [1]), 24: (["b"], [0.5], [0])},
            )
