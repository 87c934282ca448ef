"""Loss terms for negative-aware training, built on the autodiff tape.

Positive queries take the full objective: classification BCE, per-clip
indicator BCE against span-derived labels, boundary L1 on the clips inside
the ground-truth span, and an MSE saliency term against pseudo-saliency
labels. Negative queries drop the boundary term, use all-zero indicator
labels, and replace the saliency term with one of two push-down losses:

* ``cosine``: the mean cosine similarity between projected clip and query
  features (the saliency score itself), driven negative;
* ``log``: mean of -log(1 - s) over the saliency scores.

Per-batch reduction is the mean over queries within each domain; the
domain weights then combine positive / in-domain / out-of-domain batch
losses into the training total, so weights are batch-size invariant.

Logs inside losses are clamped at 1e-12 so saturated sigmoids cannot
produce infinities; the raw engine op stays unclamped.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from navmr import autodiff as ad
from navmr.autodiff import Node, Tape
from navmr.datamodel import LossWeights, MomentSpan, QueryRecord, VideoMeta
from navmr.model import ForwardGraph

LOG_CLAMP = 1e-12
SALIENCY_NEG_MODES = ("cosine", "log")


def _safe_log(tape: Tape, a: Node) -> Node:
    return ad.log(tape, ad.clamp_min(tape, a, LOG_CLAMP))


def classification_loss(tape: Tape, y_hat: Node, y: int, weight: float) -> Node:
    """Binary cross entropy on the classification score, minimizable form."""
    if y not in (0, 1):
        raise ValueError(f"class label must be 0 or 1, got {y}")
    if y == 1:
        nll = _safe_log(tape, y_hat)
    else:
        nll = _safe_log(tape, ad.sub(tape, tape.const(1.0), y_hat))
    return ad.scale(tape, nll, -weight)


def foreground_loss(tape: Tape, indicator: Node, labels: np.ndarray, weight: float) -> Node:
    """Mean per-clip BCE between indicator scores and 0/1 clip labels.

    Negative queries pass all-zero labels; the loss form itself is unchanged
    because it already pushes unlabelled indicator scores down.
    """
    labels = np.asarray(labels, dtype=np.float64)
    if indicator.value.shape != labels.shape:
        raise ValueError(
            f"indicator length {indicator.value.shape} != labels {labels.shape}")
    pos = ad.mul(tape, tape.const(labels), _safe_log(tape, indicator))
    neg = ad.mul(tape, tape.const(1.0 - labels),
                 _safe_log(tape, ad.sub(tape, tape.const(np.ones_like(labels)), indicator)))
    return ad.scale(tape, ad.mean(tape, ad.add(tape, pos, neg)), -weight)


def interior_clip_indices(span: MomentSpan, video: VideoMeta) -> list[int]:
    """Clips whose centers fall inside the span; when the span is narrower
    than the clip grid, the single clip covering its midpoint."""
    inside = [c for c in range(video.n_clips)
              if span.t_s <= video.clip_center(c) <= span.t_e]
    if inside:
        return inside
    mid = (span.t_s + span.t_e) / 2.0
    c = int(np.clip(mid // video.clip_len, 0, video.n_clips - 1))
    return [c]


def boundary_loss(tape: Tape, offsets: Node, gt_span: MomentSpan | None,
                  video: VideoMeta, weight: float) -> Node:
    """Mean L1 distance between predicted and true (left, right) offsets,
    averaged over the clips inside the ground-truth span.

    ``gt_span=None`` marks a negative query: there is no boundary to
    predict, so the term is exactly zero.
    """
    if gt_span is None:
        return tape.const(0.0)
    n_clips = offsets.value.shape[0]
    if offsets.value.shape != (n_clips, 2) or n_clips != video.n_clips:
        raise ValueError("offsets must be (n_clips, 2) for the query's video")
    interior = interior_clip_indices(gt_span, video)
    mask = np.zeros((n_clips, 2))
    target = np.zeros((n_clips, 2))
    for c in interior:
        center = video.clip_center(c)
        mask[c] = 1.0
        target[c] = (center - gt_span.t_s, gt_span.t_e - center)
    diff = ad.mul(tape, ad.sub(tape, offsets, tape.const(target)), tape.const(mask))
    return ad.scale(tape, ad.l1(tape, diff), weight / (2.0 * len(interior)))


def saliency_loss_positive(tape: Tape, saliency: Node, labels: np.ndarray,
                           weight: float) -> Node:
    """MSE between saliency scores and pseudo-saliency labels."""
    labels = np.asarray(labels, dtype=np.float64)
    if saliency.value.shape != labels.shape:
        raise ValueError(
            f"saliency length {saliency.value.shape} != labels {labels.shape}")
    d = ad.sub(tape, saliency, tape.const(labels))
    return ad.scale(tape, ad.mean(tape, ad.mul(tape, d, d)), weight)


def saliency_loss_negative_cosine(tape: Tape, clip_feats: Node, query_emb: Node,
                                  weight: float) -> Node:
    """Mean cosine similarity between each clip feature row and the query
    feature, scaled by ``weight``; minimizing drives the similarity negative."""
    if clip_feats.value.ndim != 2 or query_emb.value.ndim != 1:
        raise ValueError("clip_feats must be (n, d) and query_emb (d,)")
    if float(np.linalg.norm(query_emb.value)) == 0.0:
        raise ValueError("zero-norm query feature")
    parts = []
    for c in range(clip_feats.value.shape[0]):
        row = ad.take_row(tape, clip_feats, c)
        if float(np.linalg.norm(row.value)) == 0.0:
            raise ValueError(f"zero-norm clip feature at row {c}")
        parts.append(ad.cosine_similarity(tape, row, query_emb))
    return ad.scale(tape, ad.mean(tape, ad.stack(tape, parts)), weight)


def saliency_loss_negative_log(tape: Tape, saliency: Node, weight: float) -> Node:
    """Mean of -log(1 - s) over the saliency sequence; grows without bound
    as any score approaches 1 (clamped at the engine guard)."""
    one_minus = ad.sub(tape, tape.const(np.ones_like(saliency.value)), saliency)
    return ad.scale(tape, ad.mean(tape, _safe_log(tape, one_minus)), -weight)


def foreground_labels(query: QueryRecord, video: VideoMeta) -> np.ndarray:
    """Per-clip 0/1 labels: 1 when the clip center lies inside any span."""
    labels = np.zeros(video.n_clips)
    for span in query.spans:
        for c in range(video.n_clips):
            if span.t_s <= video.clip_center(c) <= span.t_e:
                labels[c] = 1.0
    return labels


def pseudo_saliency_labels(query: QueryRecord, video: VideoMeta) -> np.ndarray:
    """Dataset saliency annotations when present, else span-derived labels
    (1 inside any ground-truth span, 0 outside)."""
    if query.gt_saliency is not None:
        return np.asarray(query.gt_saliency, dtype=np.float64)
    return foreground_labels(query, video)


@dataclass
class QueryLossTerms:
    """Per-query loss nodes; ``l_b`` is None for negative queries."""

    qid: str
    l_p: Node
    l_f: Node
    l_s: Node
    l_b: Node | None = None

    def combined(self, tape: Tape) -> Node:
        total = ad.add(tape, ad.add(tape, self.l_p, self.l_f), self.l_s)
        if self.l_b is not None:
            total = ad.add(tape, total, self.l_b)
        return total


def query_loss_terms(tape: Tape, graph: ForwardGraph, query: QueryRecord,
                     video: VideoMeta, weights: LossWeights,
                     saliency_neg_mode: str = "log") -> QueryLossTerms:
    """Build the loss terms for one query from its forward graph."""
    if saliency_neg_mode not in SALIENCY_NEG_MODES:
        raise ValueError(f"unknown saliency_neg_mode {saliency_neg_mode!r}")
    if query.is_positive:
        l_p = classification_loss(tape, graph.class_score, 1, weights.lambda_p)
        l_f = foreground_loss(tape, graph.indicator,
                              foreground_labels(query, video), weights.lambda_f)
        span_losses = [boundary_loss(tape, graph.offsets, span, video, weights.lambda_b)
                       for span in query.spans]
        l_b = span_losses[0]
        for extra in span_losses[1:]:
            l_b = ad.add(tape, l_b, extra)
        if len(span_losses) > 1:
            l_b = ad.scale(tape, l_b, 1.0 / len(span_losses))
        l_s = saliency_loss_positive(tape, graph.saliency,
                                     pseudo_saliency_labels(query, video), weights.lambda_s)
        return QueryLossTerms(qid=query.qid, l_p=l_p, l_f=l_f, l_s=l_s, l_b=l_b)

    l_p = classification_loss(tape, graph.class_score, 0, weights.lambda_p)
    l_f = foreground_loss(tape, graph.indicator,
                          np.zeros(graph.indicator.value.shape[0]), weights.lambda_f)
    if saliency_neg_mode == "cosine":
        if (float(np.linalg.norm(graph.sal_query.value)) == 0.0
                or np.any(np.linalg.norm(graph.sal_clips.value, axis=1) == 0.0)):
            warnings.warn("zero-norm projected feature; negative saliency loss guarded to 0")
            l_s = tape.const(0.0)
        else:
            l_s = saliency_loss_negative_cosine(tape, graph.sal_clips, graph.sal_query,
                                                weights.lambda_s_neg)
    else:
        l_s = saliency_loss_negative_log(tape, graph.saliency, weights.lambda_s_neg)
    return QueryLossTerms(qid=query.qid, l_p=l_p, l_f=l_f, l_s=l_s, l_b=None)


@dataclass(frozen=True)
class LossBreakdown:
    """Scalar view of one batch loss: per-term totals (domain-weighted) and
    per-domain unweighted batch means."""

    l_p: float
    l_f: float
    l_b: float
    l_s: float
    total: float
    domain_totals: dict[str, float]

    def __post_init__(self) -> None:
        recombined = self.l_p + self.l_f + self.l_b + self.l_s
        if abs(recombined - self.total) > 1e-9:
            raise AssertionError(
                f"loss breakdown does not recombine: {recombined} vs {self.total}")


DOMAIN_ORDER = ("positive", "in_domain", "out_of_domain")


def total_loss(
    tape: Tape,
    batches: Mapping[str, Sequence[tuple[ForwardGraph, QueryRecord, VideoMeta]]],
    weights: LossWeights,
    saliency_neg_mode: str = "log",
) -> tuple[LossBreakdown, Node]:
    """Compose the batch objective.

    ``batches`` maps each domain to its (forward graph, query, video)
    triples; empty or absent domains contribute exactly zero. Returns the
    scalar breakdown and the loss node to run backward on.
    """
    if saliency_neg_mode not in SALIENCY_NEG_MODES:
        raise ValueError(f"unknown saliency_neg_mode {saliency_neg_mode!r}")
    unknown = set(batches) - set(DOMAIN_ORDER)
    if unknown:
        raise ValueError(f"unknown batch domains: {sorted(unknown)}")
    domain_weight = {
        "positive": weights.lambda_pos,
        "in_domain": weights.lambda_id,
        "out_of_domain": weights.lambda_ood,
    }

    total_node: Node | None = None
    comp_values = {"l_p": 0.0, "l_f": 0.0, "l_b": 0.0, "l_s": 0.0}
    domain_totals: dict[str, float] = {}
    for domain in DOMAIN_ORDER:
        triples = batches.get(domain, ())
        if not triples:
            continue
        lam = domain_weight[domain]
        terms = [query_loss_terms(tape, graph, query, video, weights, saliency_neg_mode)
                 for graph, query, video in triples]
        acc: Node | None = None
        for t in terms:
            q_total = t.combined(tape)
            acc = q_total if acc is None else ad.add(tape, acc, q_total)
        domain_mean = ad.scale(tape, acc, 1.0 / len(terms))
        domain_totals[domain] = float(domain_mean.value)
        contribution = ad.scale(tape, domain_mean, lam)
        total_node = contribution if total_node is None else ad.add(tape, total_node, contribution)

        n = len(terms)
        comp_values["l_p"] += lam * sum(float(t.l_p.value) for t in terms) / n
        comp_values["l_f"] += lam * sum(float(t.l_f.value) for t in terms) / n
        comp_values["l_s"] += lam * sum(float(t.l_s.value) for t in terms) / n
        comp_values["l_b"] += lam * sum(
            float(t.l_b.value) if t.l_b is not None else 0.0 for t in terms) / n

    if total_node is None:
        raise ValueError("all batches are empty")
    breakdown = LossBreakdown(
        l_p=comp_values["l_p"], l_f=comp_values["l_f"], l_b=comp_values["l_b"],
        l_s=comp_values["l_s"], total=float(total_node.value),
        domain_totals=domain_totals,
    )
    return breakdown, total_node
