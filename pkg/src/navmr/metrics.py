"""Evaluation metrics: temporal IoU, negative-aware Recall@1, rejection
accuracy, percentile utilities and histogram export.

All functions are pure and operate on immutable inputs, so they are safe to
call concurrently. Values are kept at full precision; any rounding happens
at the presentation layer.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from navmr.datamodel import MomentSpan, PredictionRecord, QueryRecord


def temporal_iou(a: MomentSpan, b: MomentSpan) -> float:
    """Intersection over union of two time spans, in [0, 1].

    The union is measured as the enclosing extent ``max(ends) - min(starts)``;
    a zero-length union (both spans degenerate at one point) is defined as 0.
    """
    inter = min(a.t_e, b.t_e) - max(a.t_s, b.t_s)
    union = max(a.t_e, b.t_e) - min(a.t_s, b.t_s)
    if union <= 0.0:
        return 0.0
    return max(0.0, inter) / union


def recall_at_1(
    predictions: Sequence[PredictionRecord],
    queries: Sequence[QueryRecord],
    theta: float,
) -> float:
    """Negative-aware Recall@1 at IoU threshold ``theta``, as a percentage.

    A positive query counts as a hit when its prediction was accepted and
    the predicted span reaches IoU >= theta against the best-matching
    ground-truth span. Rejected positives count as misses; the denominator
    is always the full positive set.
    """
    if not (0.0 < theta <= 1.0):
        raise ValueError(f"theta must lie in (0, 1], got {theta}")
    by_qid = {p.qid: p for p in predictions}
    positives = [q for q in queries if q.is_positive]
    if not positives:
        raise ValueError("no positive queries to score")
    hits = 0
    for q in positives:
        pred = by_qid.get(q.qid)
        if pred is None:
            raise ValueError(f"positive query {q.qid!r} has no prediction")
        if pred.decision != "accept":
            continue
        best = max(temporal_iou(pred.span, gt) for gt in q.spans)
        if best >= theta:
            hits += 1
    return 100.0 * hits / len(positives)


def rejection_accuracy(
    predictions: Sequence[PredictionRecord],
    negatives: Sequence[QueryRecord],
    domain: str,
) -> float:
    """Percentage of negative queries of ``domain`` that were rejected."""
    by_qid = {p.qid: p for p in predictions}
    pool = [q for q in negatives if q.label == "negative" and q.domain == domain]
    if not pool:
        raise ValueError(f"no negative queries with domain {domain!r}")
    rejected = 0
    for q in pool:
        pred = by_qid.get(q.qid)
        if pred is None:
            raise ValueError(f"negative query {q.qid!r} has no prediction")
        if pred.decision == "reject":
            rejected += 1
    return 100.0 * rejected / len(pool)


def percentile(values: Sequence[float], p: float) -> float:
    """Linear-interpolation percentile.

    With sorted values v and rank r = p/100 * (n-1), returns
    ``v[floor(r)] + frac(r) * (v[ceil(r)] - v[floor(r)])``. p=0 gives the
    minimum, p=100 the maximum, and p=50 the median.
    """
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("percentile of empty input")
    if not (0.0 <= p <= 100.0):
        raise ValueError(f"p must lie in [0, 100], got {p}")
    return float(np.percentile(arr, p, method="linear"))


def histogram_export(
    scores_pos: Sequence[float],
    scores_neg: Sequence[float],
    n_bins: int,
    value_range: tuple[float, float],
) -> list[tuple[float, float, int, int]]:
    """Equal-width histogram counts for a positive and a negative series.

    Out-of-range values are clamped into the end bins. Returns one row per
    bin: (bin_low, bin_high, pos_count, neg_count).
    """
    if n_bins < 1:
        raise ValueError("n_bins must be >= 1")
    low, high = value_range
    if not low < high:
        raise ValueError(f"range low must be < high, got {value_range}")
    edges = np.linspace(low, high, n_bins + 1)

    def counts(scores: Sequence[float]) -> np.ndarray:
        arr = np.asarray(scores, dtype=np.float64)
        if arr.size == 0:
            return np.zeros(n_bins, dtype=np.int64)
        clamped = np.clip(arr, low, high)
        hist, _ = np.histogram(clamped, bins=edges)
        return hist

    pos = counts(scores_pos)
    neg = counts(scores_neg)
    return [
        (float(edges[i]), float(edges[i + 1]), int(pos[i]), int(neg[i]))
        for i in range(n_bins)
    ]


HISTOGRAM_HEADER = "bin_low,bin_high,pos_count,neg_count"


def histogram_csv(rows: list[tuple[float, float, int, int]]) -> str:
    """Render histogram rows as the comma-delimited table used for plotting."""
    lines = [HISTOGRAM_HEADER]
    for low, high, pos, neg in rows:
        lines.append(f"{low!r},{high!r},{pos},{neg}")
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class EvalReport:
    """Joint moment-retrieval / rejection evaluation result.

    ``r1_at`` maps each IoU threshold to a Recall@1 percentage;
    ``rejection_accuracy`` maps each negative domain present in the data to
    its rejection percentage (domains without negatives are absent).
    """

    r1_at: dict[float, float]
    rejection_accuracy: dict[str, float]
    counts: dict[str, int] = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {
            "r1": {repr(t): v for t, v in sorted(self.r1_at.items())},
            "rejection_accuracy": dict(sorted(self.rejection_accuracy.items())),
            "counts": dict(sorted(self.counts.items())),
        }

    def summary_lines(self) -> list[str]:
        """Two-decimal presentation of the report for terminal output."""
        lines = []
        for theta, v in sorted(self.r1_at.items()):
            lines.append(f"R1@{theta:g}: {v:.2f}")
        for domain, v in sorted(self.rejection_accuracy.items()):
            lines.append(f"RA-{domain}: {v:.2f}")
        for name, v in sorted(self.counts.items()):
            lines.append(f"{name}: {v}")
        return lines


def build_eval_report(
    predictions: Sequence[PredictionRecord],
    queries: Sequence[QueryRecord],
    thetas: Sequence[float],
) -> EvalReport:
    """Score a prediction set against its queries at each IoU threshold."""
    positives = [q for q in queries if q.is_positive]
    negatives = [q for q in queries if not q.is_positive]
    r1 = {float(t): recall_at_1(predictions, queries, t) for t in thetas}
    ra: dict[str, float] = {}
    for domain in ("in_domain", "out_of_domain"):
        if any(q.domain == domain for q in negatives):
            ra[domain] = rejection_accuracy(predictions, negatives, domain)
    by_qid = {p.qid: p for p in predictions}
    false_neg = sum(1 for q in positives if by_qid[q.qid].decision == "reject")
    counts = {
        "positives": len(positives),
        "id_negatives": sum(1 for q in negatives if q.domain == "in_domain"),
        "ood_negatives": sum(1 for q in negatives if q.domain == "out_of_domain"),
        "false_negative_positives": false_neg,
    }
    return EvalReport(r1_at=r1, rejection_accuracy=ra, counts=counts)
