import numpy as np
import pytest

from navmr import autodiff as ad
from navmr.autodiff import Tape
from navmr.datamodel import LossWeights, MomentSpan, QueryRecord, VideoMeta
from navmr.losses import (
    LossBreakdown,
    boundary_loss,
    classification_loss,
    foreground_labels,
    foreground_loss,
    interior_clip_indices,
    pseudo_saliency_labels,
    query_loss_terms,
    saliency_loss_negative_cosine,
    saliency_loss_negative_log,
    saliency_loss_positive,
    total_loss,
)
from navmr.model import ModelConfig, forward_graph, init_params, params_to_nodes

VIDEO = VideoMeta(vid="v", duration=12.0, n_clips=6, clip_len=2.0)
CFG = ModelConfig(d_feat=4, d_hidden=5)


def positive(qid="q", vid="v", spans=((2.0, 6.0),), **kw):
    return QueryRecord(qid=qid, text="t", vid=vid, label="positive",
                       spans=tuple(MomentSpan(*s) for s in spans), **kw)


def negative(qid="n", vid="v", domain="in_domain"):
    return QueryRecord(qid=qid, text="t", vid=vid, label="negative", domain=domain)


def graph_for(query_emb, clips, params=None, cfg=CFG):
    tape = Tape()
    params = params if params is not None else init_params(cfg, 0)
    pnodes = params_to_nodes(tape, params)
    return tape, forward_graph(tape, pnodes, clips, query_emb, cfg)


class TestClassificationLoss:
    def test_midpoint(self):
        t = Tape()
        y_hat = t.leaf(0.5)
        for y in (0, 1):
            assert float(classification_loss(t, y_hat, y, 1.0).value) == pytest.approx(np.log(2))

    def test_confident_correct(self):
        t = Tape()
        y_hat = t.leaf(1.0 - 1e-12)
        assert float(classification_loss(t, y_hat, 1, 1.0).value) == pytest.approx(0.0, abs=1e-9)

    def test_weighted_wrong_answer(self):
        t = Tape()
        y_hat = t.leaf(0.9)
        got = float(classification_loss(t, y_hat, 0, 2.0).value)
        assert got == pytest.approx(2.0 * -np.log(0.1), abs=1e-9)

    def test_clamp_prevents_infinity(self):
        t = Tape()
        y_hat = t.leaf(1.0)
        assert np.isfinite(float(classification_loss(t, y_hat, 0, 1.0).value))

    def test_monotone_toward_zero_for_negative_label(self):
        losses = []
        for v in (0.9, 0.5, 0.2, 0.05):
            t = Tape()
            losses.append(float(classification_loss(t, t.leaf(v), 0, 1.0).value))
        assert losses == sorted(losses, reverse=True)


class TestForegroundLoss:
    def test_half_everywhere_is_ln2(self):
        for labels in (np.zeros(5), np.ones(5), np.array([1, 0, 1, 0, 1.0])):
            t = Tape()
            f = t.leaf(np.full(5, 0.5))
            assert float(foreground_loss(t, f, labels, 1.0).value) == pytest.approx(np.log(2))

    def test_negative_target_achieved(self):
        t = Tape()
        f = t.leaf(np.full(5, 1e-9))
        got = float(foreground_loss(t, f, np.zeros(5), 1.0).value)
        assert got == pytest.approx(0.0, abs=1e-6)

    def test_matches_scalar_loop_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            f_vals = rng.uniform(0.01, 0.99, 20)
            labels = rng.integers(0, 2, 20).astype(float)
            t = Tape()
            got = float(foreground_loss(t, t.leaf(f_vals), labels, 1.0).value)
            manual = -np.mean([l * np.log(p) + (1 - l) * np.log(1 - p)
                               for p, l in zip(f_vals, labels)])
            assert got == pytest.approx(manual, abs=1e-9)

    def test_length_mismatch(self):
        t = Tape()
        with pytest.raises(ValueError):
            foreground_loss(t, t.leaf(np.ones(3) / 2), np.zeros(4), 1.0)


class TestBoundaryLoss:
    def test_perfect_offsets(self):
        t = Tape()
        span = MomentSpan(2.0, 6.0)
        target = np.zeros((6, 2))
        for c in interior_clip_indices(span, VIDEO):
            center = VIDEO.clip_center(c)
            target[c] = (center - span.t_s, span.t_e - center)
        got = float(boundary_loss(t, t.leaf(target), span, VIDEO, 1.0).value)
        assert got == pytest.approx(0.0)

    def test_negative_query_is_zero(self):
        t = Tape()
        offsets = t.leaf(np.ones((6, 2)))
        assert float(boundary_loss(t, offsets, None, VIDEO, 1.0).value) == 0.0

    def test_single_interior_clip_hand_value(self):
        video = VideoMeta(vid="v", duration=2.0, n_clips=1, clip_len=2.0)
        t = Tape()
        offsets = t.leaf(np.array([[1.0, 1.0]]))
        # clip center 1.0; true offsets relative to span [-1, 4] clipped...
        # use a span making true offsets (2, 3): t_s = -1? spans are in-video,
        # so craft with center -> t_s = center-2 = -1 invalid. Use a 6-clip video.
        span = MomentSpan(1.0, 6.0)
        t2 = Tape()
        pred = np.zeros((6, 2))
        pred[1] = (1.0, 1.0)  # clip 1 center = 3.0; true = (2.0, 3.0)
        # restrict interior to one clip by narrowing the span around center 3.0
        narrow = MomentSpan(2.5, 3.5)
        got = float(boundary_loss(t2, t2.leaf(pred), narrow, VIDEO, 1.0).value)
        true_l, true_r = 3.0 - 2.5, 3.5 - 3.0
        expect = (abs(1.0 - true_l) + abs(1.0 - true_r)) / 2.0
        assert got == pytest.approx(expect)

    def test_hand_arithmetic_offsets_2_3(self):
        # one interior clip, predicted (1,1) vs true (2,3) -> (1+2)/2 = 1.5
        video = VideoMeta(vid="v", duration=10.0, n_clips=5, clip_len=2.0)
        span = MomentSpan(3.0, 8.0)  # centers 5.0 in span; clips 2 (5.0), 3 (7.0)
        # narrow to exactly clip 2: center 5.0, true = (2.0, 3.0)
        narrow = MomentSpan(5.0 - 2.0, 5.0 + 3.0)  # [3, 8]: contains centers 5 and 7
        # use per-clip mask: choose span [4.5, 5.5] -> single clip 2, true (0.5, 0.5)
        t = Tape()
        pred = np.zeros((5, 2))
        pred[2] = (1.0, 1.0)
        got = float(boundary_loss(t, t.leaf(pred), MomentSpan(4.5, 5.5), video, 2.0).value)
        assert got == pytest.approx(2.0 * ((abs(1 - 0.5) + abs(1 - 0.5)) / 2))

    def test_span_narrower_than_clip_uses_covering_clip(self):
        span = MomentSpan(2.1, 2.3)  # no clip center inside; covering clip 1
        assert interior_clip_indices(span, VIDEO) == [1]

    def test_weight_scaling(self):
        t1, t2 = Tape(), Tape()
        pred = np.ones((6, 2))
        span = MomentSpan(2.0, 6.0)
        a = float(boundary_loss(t1, t1.leaf(pred), span, VIDEO, 1.0).value)
        b = float(boundary_loss(t2, t2.leaf(pred), span, VIDEO, 3.0).value)
        assert b == pytest.approx(3.0 * a)


class TestSaliencyLosses:
    def test_positive_perfect(self):
        t = Tape()
        labels = np.array([0.0, 1.0, 1.0, 0.0])
        s = t.leaf(labels.copy())
        assert float(saliency_loss_positive(t, s, labels, 1.0).value) == 0.0

    def test_positive_all_wrong(self):
        t = Tape()
        s = t.leaf(np.zeros(4))
        got = float(saliency_loss_positive(t, s, np.ones(4), 2.5).value)
        assert got == pytest.approx(2.5)

    def test_positive_matches_scalar_loop(self):
        rng = np.random.default_rng(1)
        s_vals = rng.uniform(-1, 1, 10)
        labels = rng.uniform(0, 1, 10)
        t = Tape()
        got = float(saliency_loss_positive(t, t.leaf(s_vals), labels, 1.0).value)
        manual = np.mean([(a - b) ** 2 for a, b in zip(s_vals, labels)])
        assert got == pytest.approx(manual, abs=1e-9)

    def test_cosine_parallel(self):
        t = Tape()
        clips = t.leaf(np.tile([1.0, 2.0, 0.5], (4, 1)))
        q = t.leaf(np.array([2.0, 4.0, 1.0]))
        got = float(saliency_loss_negative_cosine(t, clips, q, 0.7).value)
        assert got == pytest.approx(0.7)

    def test_cosine_orthogonal(self):
        t = Tape()
        clips = t.leaf(np.array([[1.0, 0.0], [1.0, 0.0]]))
        q = t.leaf(np.array([0.0, 3.0]))
        assert float(saliency_loss_negative_cosine(t, clips, q, 1.0).value) == pytest.approx(0.0)

    def test_cosine_antiparallel(self):
        t = Tape()
        clips = t.leaf(np.array([[1.0, 1.0]]))
        q = t.leaf(np.array([-2.0, -2.0]))
        got = float(saliency_loss_negative_cosine(t, clips, q, 1.5).value)
        assert got == pytest.approx(-1.5)

    def test_log_all_zero(self):
        t = Tape()
        s = t.leaf(np.zeros(5))
        assert float(saliency_loss_negative_log(t, s, 1.0).value) == 0.0

    def test_log_half(self):
        t = Tape()
        s = t.leaf(np.array([0.5]))
        assert float(saliency_loss_negative_log(t, s, 1.0).value) == pytest.approx(np.log(2))

    def test_log_grows_near_one_but_finite(self):
        t = Tape()
        s = t.leaf(np.array([1.0 - 1e-15]))
        got = float(saliency_loss_negative_log(t, s, 1.0).value)
        assert got > 20.0
        assert np.isfinite(got)

    def test_log_monotone_decreasing_scores_decrease_loss(self):
        prev = None
        for shift in (0.8, 0.6, 0.4, 0.0, -0.5):
            t = Tape()
            s = t.leaf(np.full(4, shift))
            cur = float(saliency_loss_negative_log(t, s, 1.0).value)
            if prev is not None:
                assert cur < prev
            prev = cur


class TestLabels:
    def test_foreground_labels(self):
        q = positive(spans=((2.0, 6.0),))
        # centers: 1, 3, 5, 7, 9, 11 -> inside [2, 6]: clips 1 and 2
        np.testing.assert_array_equal(foreground_labels(q, VIDEO),
                                      [0, 1, 1, 0, 0, 0])

    def test_multi_span_union(self):
        q = positive(spans=((0.0, 2.0), (8.0, 12.0)))
        np.testing.assert_array_equal(foreground_labels(q, VIDEO),
                                      [1, 0, 0, 0, 1, 1])

    def test_pseudo_saliency_prefers_annotations(self):
        q = positive(gt_saliency=(0.1, 0.2, 0.3, 0.4, 0.5, 0.6))
        np.testing.assert_array_equal(pseudo_saliency_labels(q, VIDEO),
                                      [0.1, 0.2, 0.3, 0.4, 0.5, 0.6])

    def test_pseudo_saliency_falls_back_to_spans(self):
        q = positive()
        np.testing.assert_array_equal(pseudo_saliency_labels(q, VIDEO),
                                      foreground_labels(q, VIDEO))


class TestTotalLoss:
    def _batches(self, rng, n_pos=2, n_id=2, n_ood=2, cfg=CFG, params=None):
        tape = Tape()
        params = params if params is not None else init_params(cfg, 3)
        pnodes = params_to_nodes(tape, params)
        batches = {"positive": [], "in_domain": [], "out_of_domain": []}
        for i in range(n_pos):
            clips = rng.normal(size=(6, 4))
            g = forward_graph(tape, pnodes, clips, rng.normal(size=4), cfg)
            batches["positive"].append((g, positive(qid=f"q{i}"), VIDEO))
        for i in range(n_id):
            clips = rng.normal(size=(6, 4))
            g = forward_graph(tape, pnodes, clips, rng.normal(size=4), cfg)
            batches["in_domain"].append((g, negative(qid=f"n{i}"), VIDEO))
        for i in range(n_ood):
            clips = rng.normal(size=(6, 4))
            g = forward_graph(tape, pnodes, clips, rng.normal(size=4), cfg)
            batches["out_of_domain"].append((g, negative(qid=f"o{i}", domain="out_of_domain"), VIDEO))
        return tape, batches

    def test_decomposition(self):
        rng = np.random.default_rng(2)
        tape, batches = self._batches(rng)
        weights = LossWeights.defaults()
        breakdown, node = total_loss(tape, batches, weights)
        assert breakdown.total == pytest.approx(float(node.value))
        assert breakdown.total == pytest.approx(
            breakdown.l_p + breakdown.l_f + breakdown.l_b + breakdown.l_s, abs=1e-9)
        assert breakdown.total == pytest.approx(
            weights.lambda_pos * breakdown.domain_totals["positive"]
            + weights.lambda_id * breakdown.domain_totals["in_domain"]
            + weights.lambda_ood * breakdown.domain_totals["out_of_domain"], abs=1e-9)

    def test_empty_id_batch_contributes_zero(self):
        rng = np.random.default_rng(3)
        tape, batches = self._batches(rng, n_id=0)
        weights = LossWeights.defaults()
        breakdown, _ = total_loss(tape, batches, weights)
        assert "in_domain" not in breakdown.domain_totals
        assert breakdown.total == pytest.approx(
            weights.lambda_pos * breakdown.domain_totals["positive"]
            + weights.lambda_ood * breakdown.domain_totals["out_of_domain"], abs=1e-9)

    def test_negative_boundary_term_is_exactly_zero(self):
        rng = np.random.default_rng(4)
        tape, batches = self._batches(rng, n_pos=0, n_id=3, n_ood=3)
        breakdown, _ = total_loss(tape, batches, LossWeights.defaults())
        assert breakdown.l_b == 0.0

    def test_unknown_mode(self):
        rng = np.random.default_rng(5)
        tape, batches = self._batches(rng)
        with pytest.raises(ValueError, match="mode"):
            total_loss(tape, batches, LossWeights.defaults(), saliency_neg_mode="huber")

    def test_default_weights_match_documented_values(self):
        w = LossWeights.defaults()
        assert (w.lambda_pos, w.lambda_id, w.lambda_ood, w.lambda_p) == (1.0, 0.1, 0.1, 1.0)
        charades = LossWeights.defaults(lambda_id=0.5, lambda_ood=0.5)
        assert (charades.lambda_id, charades.lambda_ood) == (0.5, 0.5)

    def test_lambda_s_neg_follows_lambda_s_by_default(self):
        w = LossWeights.defaults(lambda_s=0.3)
        assert w.lambda_s_neg == 0.3

    def test_all_empty_is_error(self):
        tape = Tape()
        with pytest.raises(ValueError):
            total_loss(tape, {"positive": []}, LossWeights.defaults())

    def test_cosine_mode_runs(self):
        rng = np.random.default_rng(6)
        tape, batches = self._batches(rng)
        breakdown, node = total_loss(tape, batches, LossWeights.defaults(),
                                     saliency_neg_mode="cosine")
        assert np.isfinite(breakdown.total)


class TestLossGradients:
    """Every loss term must agree with central differences."""

    def _full_loss_builder(self, clips_list, queries, videos, weights, mode, cfg):
        names = list(init_params(cfg, 0).keys())

        def build(tape, *leaves):
            pnodes = dict(zip(names, leaves))
            batches = {"positive": [], "in_domain": [], "out_of_domain": []}
            for clips, (query, emb), video in zip(clips_list, queries, videos):
                g = forward_graph(tape, pnodes, clips, emb, cfg)
                key = "positive" if query.is_positive else query.domain
                batches[key].append((g, query, video))
            _, node = total_loss(tape, batches, weights, saliency_neg_mode=mode)
            return node

        return build

    @pytest.mark.parametrize("mode", ["log", "cosine"])
    def test_total_loss_gradient(self, mode):
        rng = np.random.default_rng(7)
        cfg = ModelConfig(d_feat=3, d_hidden=4)
        video = VideoMeta(vid="v", duration=6.0, n_clips=3, clip_len=2.0)
        clips_list = [rng.normal(size=(3, 3)) for _ in range(3)]
        queries = [
            (positive(spans=((1.0, 4.0),)), rng.normal(size=3)),
            (negative(), rng.normal(size=3)),
            (negative(domain="out_of_domain"), rng.normal(size=3)),
        ]
        params = init_params(cfg, 9)
        build = self._full_loss_builder(clips_list, queries, [video] * 3,
                                        LossWeights.defaults(), mode, cfg)
        report = ad.grad_check(build, list(params.values()), eps=1e-4, tol=1e-4)
        assert report.ok, report.failures[:5]

    def test_classification_loss_gradient(self):
        def build(tape, logit):
            y_hat = ad.sigmoid(tape, logit)
            return classification_loss(tape, y_hat, 1, 1.3)

        report = ad.grad_check(build, np.array(0.37), eps=1e-4, tol=1e-4)
        assert report.ok

    def test_boundary_loss_gradient(self):
        rng = np.random.default_rng(8)
        span = MomentSpan(2.0, 6.0)

        def build(tape, raw):
            offsets = ad.softplus(tape, raw)
            return boundary_loss(tape, offsets, span, VIDEO, 0.8)

        report = ad.grad_check(build, rng.normal(size=(6, 2)), eps=1e-4, tol=1e-4)
        assert report.ok

    def test_saliency_negative_log_gradient(self):
        rng = np.random.default_rng(9)

        def build(tape, raw):
            s = ad.tanh(tape, raw)
            return saliency_loss_negative_log(tape, s, 1.1)

        report = ad.grad_check(build, rng.normal(size=5), eps=1e-4, tol=1e-4)
        assert report.ok

    def test_saliency_negative_cosine_gradient(self):
        rng = np.random.default_rng(10)

        def build(tape, clips, q):
            return saliency_loss_negative_cosine(tape, clips, q, 0.9)

        report = ad.grad_check(build, [rng.normal(size=(4, 3)) + 0.2,
                                       rng.normal(size=3) + 0.2], eps=1e-4, tol=1e-4)
        assert report.ok
