import numpy as np
import pytest

from navmr.datamodel import MomentSpan, PredictionRecord, QueryRecord
from navmr.metrics import (
    build_eval_report,
    histogram_csv,
    histogram_export,
    percentile,
    recall_at_1,
    rejection_accuracy,
    temporal_iou,
)


def positive(qid, spans):
    return QueryRecord(qid=qid, text="t", vid="v1", label="positive",
                       spans=tuple(MomentSpan(*s) for s in spans))


def negative(qid, domain="in_domain"):
    return QueryRecord(qid=qid, text="t", vid="v1", label="negative", domain=domain)


def accept(qid, span, score=0.9):
    return PredictionRecord(qid=qid, class_score=score, decision="accept",
                            span=MomentSpan(*span))


def reject(qid, score=0.1):
    return PredictionRecord(qid=qid, class_score=score, decision="reject")


class TestTemporalIou:
    def test_identity(self):
        assert temporal_iou(MomentSpan(2, 6), MomentSpan(2, 6)) == 1.0

    def test_disjoint(self):
        assert temporal_iou(MomentSpan(0, 2), MomentSpan(5, 9)) == 0.0

    def test_partial_overlap(self):
        # intersection 5, enclosing extent 15
        assert temporal_iou(MomentSpan(0, 10), MomentSpan(5, 15)) == pytest.approx(1 / 3, abs=1e-6)

    def test_degenerate_union(self):
        assert temporal_iou(MomentSpan(3, 3), MomentSpan(3, 3)) == 0.0

    def test_symmetry_random(self):
        rng = np.random.default_rng(11)
        for _ in range(500):
            a = np.sort(rng.uniform(0, 30, 2))
            b = np.sort(rng.uniform(0, 30, 2))
            sa, sb = MomentSpan(*a), MomentSpan(*b)
            assert temporal_iou(sa, sb) == temporal_iou(sb, sa)
            assert 0.0 <= temporal_iou(sa, sb) <= 1.0

    def test_self_iou_is_one(self):
        rng = np.random.default_rng(12)
        for _ in range(100):
            a = np.sort(rng.uniform(0, 30, 2))
            if a[0] == a[1]:
                continue
            assert temporal_iou(MomentSpan(*a), MomentSpan(*a)) == 1.0

    def test_monotone_under_translation(self):
        base = MomentSpan(10.0, 14.0)
        prev = 1.0
        for shift in np.linspace(0, 10, 21):
            cur = temporal_iou(base, MomentSpan(10.0 + shift, 14.0 + shift))
            assert cur <= prev + 1e-12
            prev = cur


class TestRecallAt1:
    def test_mixed_outcomes(self):
        queries = [positive(f"q{i}", [(0.0, 10.0)]) for i in range(4)]
        # IoU values 0.8, 0.6, 0.3 plus one rejection -> 2 of 4 at theta 0.5
        preds = [
            accept("q0", (1.0, 9.8)),    # iou ~0.88
            accept("q1", (2.0, 10.0)),   # iou 0.8
            accept("q2", (7.0, 10.0)),   # iou 0.3
            reject("q3"),
        ]
        assert recall_at_1(preds, queries, 0.5) == 50.0

    def test_all_exact(self):
        queries = [positive(f"q{i}", [(2.0, 6.0)]) for i in range(5)]
        preds = [accept(f"q{i}", (2.0, 6.0)) for i in range(5)]
        assert recall_at_1(preds, queries, 0.7) == 100.0

    def test_all_rejected(self):
        queries = [positive(f"q{i}", [(2.0, 6.0)]) for i in range(5)]
        preds = [reject(f"q{i}") for i in range(5)]
        assert recall_at_1(preds, queries, 0.5) == 0.0

    def test_multi_span_uses_best(self):
        q = positive("q0", [(0.0, 4.0), (20.0, 24.0)])
        assert recall_at_1([accept("q0", (20.0, 24.0))], [q], 0.9) == 100.0

    def test_invalid_theta(self):
        q = positive("q0", [(0.0, 4.0)])
        with pytest.raises(ValueError):
            recall_at_1([accept("q0", (0.0, 4.0))], [q], 0.0)
        with pytest.raises(ValueError):
            recall_at_1([accept("q0", (0.0, 4.0))], [q], 1.5)

    def test_missing_prediction(self):
        q = positive("q0", [(0.0, 4.0)])
        with pytest.raises(ValueError, match="q0"):
            recall_at_1([], [q], 0.5)

    def test_matches_bruteforce_oracle(self):
        rng = np.random.default_rng(42)
        for _ in range(1000):
            n = int(rng.integers(1, 9))
            queries, preds = [], []
            for i in range(n):
                spans = [tuple(np.sort(rng.uniform(0, 20, 2))) for _ in range(int(rng.integers(1, 3)))]
                spans = [(a, b if b > a else a + 0.5) for a, b in spans]
                queries.append(positive(f"q{i}", spans))
                if rng.random() < 0.25:
                    preds.append(reject(f"q{i}"))
                else:
                    a, b = np.sort(rng.uniform(0, 20, 2))
                    preds.append(accept(f"q{i}", (a, b if b > a else a + 0.5)))
            theta = float(rng.uniform(0.05, 1.0))
            got = recall_at_1(preds, queries, theta)

            # independent per-query scan
            hits = 0
            for q, p in zip(queries, preds):
                if p.decision != "accept":
                    continue
                ok = False
                for gt in q.spans:
                    inter = min(p.span.t_e, gt.t_e) - max(p.span.t_s, gt.t_s)
                    union = max(p.span.t_e, gt.t_e) - min(p.span.t_s, gt.t_s)
                    iou = max(0.0, inter) / union if union > 0 else 0.0
                    ok = ok or iou >= theta
                hits += int(ok)
            assert got == 100.0 * hits / n


class TestRejectionAccuracy:
    def test_three_of_four(self):
        negs = [negative(f"n{i}") for i in range(4)]
        preds = [reject("n0"), reject("n1"), reject("n2"),
                 accept("n3", (0.0, 1.0))]
        assert rejection_accuracy(preds, negs, "in_domain") == 75.0

    def test_all_ood_rejected(self):
        negs = [negative(f"n{i}", "out_of_domain") for i in range(6)]
        preds = [reject(f"n{i}") for i in range(6)]
        assert rejection_accuracy(preds, negs, "out_of_domain") == 100.0

    def test_empty_domain(self):
        with pytest.raises(ValueError):
            rejection_accuracy([], [negative("n0")], "out_of_domain")

    def test_matches_tally_oracle(self):
        rng = np.random.default_rng(5)
        negs, preds, tally = [], [], 0
        for i in range(200):
            negs.append(negative(f"n{i}"))
            if rng.random() < 0.6:
                preds.append(reject(f"n{i}"))
                tally += 1
            else:
                preds.append(accept(f"n{i}", (0.0, 1.0)))
        assert rejection_accuracy(preds, negs, "in_domain") == 100.0 * tally / 200


class TestPercentile:
    def test_hand_interpolation(self):
        assert percentile([1, 2, 3, 4], 50) == pytest.approx(2.5)

    def test_p0_is_min(self):
        rng = np.random.default_rng(1)
        vals = rng.normal(size=37)
        assert percentile(vals, 0) == vals.min()

    def test_p100_is_max(self):
        rng = np.random.default_rng(2)
        vals = rng.normal(size=23)
        assert percentile(vals, 100) == vals.max()

    def test_median_odd_n(self):
        rng = np.random.default_rng(3)
        for n in [1, 3, 9, 51]:
            vals = rng.normal(size=n)
            assert percentile(vals, 50) == pytest.approx(float(np.median(vals)))

    def test_matches_manual_oracle(self):
        rng = np.random.default_rng(4)
        for _ in range(1000):
            n = int(rng.integers(1, 40))
            vals = rng.normal(size=n)
            p = float(rng.uniform(0, 100))
            v = np.sort(vals)
            r = p / 100.0 * (n - 1)
            lo, hi = int(np.floor(r)), int(np.ceil(r))
            expect = v[lo] + (r - lo) * (v[hi] - v[lo])
            assert percentile(vals, p) == pytest.approx(expect, abs=1e-9)

    def test_errors(self):
        with pytest.raises(ValueError):
            percentile([], 50)
        with pytest.raises(ValueError):
            percentile([1.0], 101)


class TestHistogramExport:
    def test_two_bins(self):
        rows = histogram_export([0.1, 0.9], [], 2, (0.0, 1.0))
        assert [(r[2], r[3]) for r in rows] == [(1, 0), (1, 0)]

    def test_empty_negative_series(self):
        rows = histogram_export([0.2, 0.4, 0.6], [], 3, (0.0, 1.0))
        assert all(r[3] == 0 for r in rows)
        assert sum(r[2] for r in rows) == 3

    def test_clamps_out_of_range(self):
        rows = histogram_export([-5.0], [99.0], 4, (0.0, 1.0))
        assert rows[0][2] == 1
        assert rows[-1][3] == 1

    def test_matches_bruteforce_bucketing(self):
        rng = np.random.default_rng(6)
        scores = rng.uniform(0, 1, 1000)
        rows = histogram_export(scores, [], 10, (0.0, 1.0))
        manual = [0] * 10
        for s in scores:
            idx = min(int(s * 10), 9)
            manual[idx] += 1
        assert [r[2] for r in rows] == manual

    def test_csv_header(self):
        text = histogram_csv(histogram_export([0.5], [0.5], 2, (0.0, 1.0)))
        assert text.splitlines()[0] == "bin_low,bin_high,pos_count,neg_count"

    def test_errors(self):
        with pytest.raises(ValueError):
            histogram_export([0.5], [], 0, (0.0, 1.0))
        with pytest.raises(ValueError):
            histogram_export([0.5], [], 2, (1.0, 1.0))


class TestEvalReport:
    def test_all_accept_zero_ra(self):
        # with every decision accept, rejection has no effect on R1 and both
        # rejection accuracies are exactly zero
        queries = [positive(f"q{i}", [(0.0, 10.0)]) for i in range(4)]
        queries += [negative(f"n{i}") for i in range(3)]
        queries += [negative(f"o{i}", "out_of_domain") for i in range(3)]
        preds = [accept(q.qid, (0.0, 10.0)) for q in queries]
        report = build_eval_report(preds, queries, [0.5, 0.7])
        assert report.rejection_accuracy == {"in_domain": 0.0, "out_of_domain": 0.0}
        assert report.r1_at[0.5] == 100.0
        assert report.counts["false_negative_positives"] == 0

    def test_negative_aware_equals_classic_when_all_accept(self):
        rng = np.random.default_rng(9)
        queries, preds = [], []
        for i in range(50):
            a, b = np.sort(rng.uniform(0, 20, 2))
            queries.append(positive(f"q{i}", [(a, b if b > a else a + 1.0)]))
            c, d = np.sort(rng.uniform(0, 20, 2))
            preds.append(accept(f"q{i}", (c, d if d > c else c + 1.0)))
        na = recall_at_1(preds, queries, 0.5)
        classic_hits = sum(
            1 for q, p in zip(queries, preds)
            if max(temporal_iou(p.span, gt) for gt in q.spans) >= 0.5
        )
        assert na == 100.0 * classic_hits / 50

    def test_ra_absent_without_negatives(self):
        queries = [positive("q0", [(0.0, 5.0)])]
        report = build_eval_report([accept("q0", (0.0, 5.0))], queries, [0.5])
        assert report.rejection_accuracy == {}

    def test_counts(self):
        queries = [positive("q0", [(0.0, 5.0)]), negative("n0"),
                   negative("o0", "out_of_domain")]
        preds = [reject("q0"), reject("n0"), accept("o0", (0.0, 1.0))]
        report = build_eval_report(preds, queries, [0.5])
        assert report.counts == {
            "positives": 1,
            "id_negatives": 1,
            "ood_negatives": 1,
            "false_negative_positives": 1,
        }
