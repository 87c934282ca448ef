"""The miniature moment-retrieval model and its rejection head.

The base model scores one (video, query) pair per forward pass: clip and
query embeddings are projected into a shared hidden space, fused with tanh,
and read out by three heads -- a per-clip indicator score, a per-clip
(left, right) boundary offset pair (softplus keeps offsets non-negative),
and a per-clip saliency score computed as the cosine similarity of a second,
dedicated projection pair.

On top of those score sequences sits a binary classification head: the
indicator and saliency sequences are combined (elementwise sum, or
concatenation with saliency first), consumed one scalar per step by a
single-layer tanh RNN, and the final hidden state is mapped through a linear
layer and a sigmoid to the accept/reject score.

Parameters live in a plain ``dict[str, np.ndarray]`` (float64) whose keys
and shapes come from :func:`param_shapes`. Everything runs on the autodiff
tape so the same forward pass serves training and inference.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from navmr import autodiff as ad
from navmr.autodiff import Node, Tape
from navmr.datamodel import (
    MomentSpan,
    PredictionRecord,
    ScoreBundle,
    ValidationError,
    VideoMeta,
)

COMBINE_MODES = ("summation", "concatenation")


@dataclass(frozen=True)
class ModelConfig:
    d_feat: int
    d_hidden: int = 50
    combine: str = "summation"
    decision_threshold: float = 0.5

    def __post_init__(self) -> None:
        if self.d_feat < 1 or self.d_hidden < 1:
            raise ValidationError("d_feat and d_hidden must be >= 1")
        if self.combine not in COMBINE_MODES:
            raise ValidationError(f"unknown combine mode {self.combine!r}")
        if not (0.0 < self.decision_threshold < 1.0):
            raise ValidationError("decision_threshold must lie in (0, 1)")


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Canonical parameter names and shapes; iteration order is the
    serialization order for checkpoints."""
    d, h = config.d_feat, config.d_hidden
    return {
        "proj_v": (d, h),
        "proj_q": (d, h),
        "w_f": (h,),
        "b_f": (),
        "w_b": (h, 2),
        "b_b": (2,),
        "sal_v": (d, h),
        "sal_q": (d, h),
        "rnn_w_in": (h,),
        "rnn_w_rec": (h, h),
        "rnn_b": (h,),
        "out_w": (h,),
        "out_b": (),
    }


def init_params(config: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    """Gaussian init (scale 0.1) for weights, zeros for biases."""
    rng = np.random.default_rng(seed)
    biases = {"b_f", "b_b", "rnn_b", "out_b"}
    params: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(config).items():
        if name in biases:
            params[name] = np.zeros(shape, dtype=np.float64)
        else:
            params[name] = rng.normal(scale=0.1, size=shape)
    return params


def zero_params(config: ModelConfig) -> dict[str, np.ndarray]:
    return {name: np.zeros(shape, dtype=np.float64)
            for name, shape in param_shapes(config).items()}


def validate_params(params: Mapping[str, np.ndarray], config: ModelConfig) -> None:
    shapes = param_shapes(config)
    for name, shape in shapes.items():
        if name not in params:
            raise ValidationError(f"missing parameter tensor {name!r}")
        if tuple(params[name].shape) != shape:
            raise ValidationError(
                f"parameter {name!r} has shape {tuple(params[name].shape)}, expected {shape}")
        if not np.all(np.isfinite(params[name])):
            raise ValidationError(f"parameter {name!r} contains non-finite values")
    extra = set(params) - set(shapes)
    if extra:
        raise ValidationError(f"unexpected parameter tensors: {sorted(extra)}")


def params_to_nodes(tape: Tape, params: Mapping[str, np.ndarray]) -> dict[str, Node]:
    return {name: tape.leaf(value) for name, value in params.items()}


@dataclass
class ForwardGraph:
    """Autodiff handles from one (video, query) forward pass."""

    indicator: Node        # (L,) in (0, 1)
    saliency: Node         # (L,) in [-1, 1]
    offsets: Node          # (L, 2) non-negative seconds
    sal_clips: Node        # (L, h) saliency-projected clip features
    sal_query: Node        # (h,) saliency-projected query feature
    class_score: Node      # scalar in (0, 1)


def base_graph(tape: Tape, pnodes: Mapping[str, Node],
               clip_feats: np.ndarray, query_emb: np.ndarray) -> tuple[Node, Node, Node, Node, Node]:
    """Run the base model; returns (indicator, saliency, offsets,
    sal_clips, sal_query) nodes."""
    clip_feats = np.asarray(clip_feats, dtype=np.float64)
    query_emb = np.asarray(query_emb, dtype=np.float64)
    if clip_feats.ndim != 2 or query_emb.ndim != 1 or clip_feats.shape[1] != query_emb.shape[0]:
        raise ValueError(
            f"clip features {clip_feats.shape} and query embedding {query_emb.shape} disagree")
    if clip_feats.shape[1] != pnodes["proj_v"].value.shape[0]:
        raise ValueError(
            f"feature dim {clip_feats.shape[1]} does not match model "
            f"d_feat {pnodes['proj_v'].value.shape[0]}")

    clips = tape.leaf(clip_feats)
    query = tape.leaf(query_emb)

    fused = ad.tanh(tape, ad.add(tape, ad.matmul(tape, clips, pnodes["proj_v"]),
                                 ad.matmul(tape, query, pnodes["proj_q"])))
    indicator = ad.sigmoid(tape, ad.add(tape, ad.matmul(tape, fused, pnodes["w_f"]),
                                        pnodes["b_f"]))
    offsets = ad.softplus(tape, ad.add(tape, ad.matmul(tape, fused, pnodes["w_b"]),
                                       pnodes["b_b"]))

    sal_clips = ad.matmul(tape, clips, pnodes["sal_v"])
    sal_query = ad.matmul(tape, query, pnodes["sal_q"])
    q_norm = float(np.linalg.norm(sal_query.value))
    sal_parts: list[Node] = []
    for c in range(clip_feats.shape[0]):
        row = ad.take_row(tape, sal_clips, c)
        if q_norm == 0.0 or float(np.linalg.norm(row.value)) == 0.0:
            warnings.warn("zero-norm projected feature; saliency guarded to 0")
            sal_parts.append(tape.const(0.0))
        else:
            sal_parts.append(ad.cosine_similarity(tape, row, sal_query))
    saliency = ad.stack(tape, sal_parts)
    return indicator, saliency, offsets, sal_clips, sal_query


def na_head_graph(tape: Tape, pnodes: Mapping[str, Node],
                  indicator: Node, saliency: Node, config: ModelConfig) -> Node:
    """Classification head: combined score sequence -> RNN -> linear -> sigmoid."""
    if indicator.value.ndim != 1 or saliency.value.ndim != 1:
        raise ValueError("indicator and saliency must be 1-D sequences")
    if indicator.value.size == 0 or saliency.value.size == 0:
        raise ValueError("empty score sequence")
    if config.combine == "summation":
        if indicator.value.shape != saliency.value.shape:
            raise ValueError("summation combine requires equal-length sequences")
        combined = ad.add(tape, indicator, saliency)
    else:  # concatenation: saliency sequence first, indicator after
        combined = ad.concat(tape, saliency, indicator)

    h = tape.const(np.zeros(config.d_hidden))
    for t in range(combined.value.shape[0]):
        step = ad.take(tape, combined, t)
        pre = ad.add(tape, ad.add(tape, ad.mul(tape, step, pnodes["rnn_w_in"]),
                                  ad.matmul(tape, pnodes["rnn_w_rec"], h)),
                     pnodes["rnn_b"])
        h = ad.tanh(tape, pre)
    logit = ad.add(tape, ad.matmul(tape, pnodes["out_w"], h), pnodes["out_b"])
    return ad.sigmoid(tape, logit)


def forward_graph(tape: Tape, pnodes: Mapping[str, Node], clip_feats: np.ndarray,
                  query_emb: np.ndarray, config: ModelConfig) -> ForwardGraph:
    indicator, saliency, offsets, sal_clips, sal_query = base_graph(
        tape, pnodes, clip_feats, query_emb)
    class_score = na_head_graph(tape, pnodes, indicator, saliency, config)
    return ForwardGraph(indicator=indicator, saliency=saliency, offsets=offsets,
                        sal_clips=sal_clips, sal_query=sal_query, class_score=class_score)


def forward_base(clip_feats: np.ndarray, query_emb: np.ndarray,
                 params: Mapping[str, np.ndarray], config: ModelConfig,
                 qid: str = "") -> ScoreBundle:
    """Inference-only base pass, returning plain score sequences."""
    tape = Tape()
    pnodes = params_to_nodes(tape, params)
    indicator, saliency, offsets, _, _ = base_graph(tape, pnodes, clip_feats, query_emb)
    return ScoreBundle(
        qid=qid,
        indicator=tuple(float(v) for v in indicator.value),
        saliency=tuple(float(v) for v in saliency.value),
        clip_spans=tuple((float(l), float(r)) for l, r in offsets.value),
    )


def forward_na_head(bundle: ScoreBundle, params: Mapping[str, np.ndarray],
                    config: ModelConfig) -> float:
    """Inference-only classification score for an existing score bundle."""
    tape = Tape()
    pnodes = params_to_nodes(tape, params)
    indicator = tape.leaf(np.asarray(bundle.indicator, dtype=np.float64))
    saliency = tape.leaf(np.asarray(bundle.saliency, dtype=np.float64))
    return float(na_head_graph(tape, pnodes, indicator, saliency, config).value)


def predict(bundle: ScoreBundle, na_score: float, video: VideoMeta,
            config: ModelConfig) -> PredictionRecord:
    """Turn scores into the final output tuple.

    The span is anchored at the highest-indicator clip (ties resolve to the
    lowest index) and extended by that clip's predicted offsets, clamped to
    the video extent. The span is attached only when the classification
    score clears the decision threshold; a rejected query carries no span.
    """
    indicator = np.asarray(bundle.indicator)
    c_star = int(np.argmax(indicator))
    decision = "accept" if na_score >= config.decision_threshold else "reject"
    if decision == "reject":
        return PredictionRecord(qid=bundle.qid, class_score=float(na_score),
                                decision="reject", span=None)
    center = min(max(video.clip_center(c_star), 0.0), video.duration)
    left, right = bundle.clip_spans[c_star]
    t_s = max(0.0, center - left)
    t_e = min(video.duration, center + right)
    if t_e <= t_s:  # degenerate offsets after clamping; keep a sliver of a span
        t_s = max(0.0, t_e - 1e-6)
        if t_e <= t_s:
            t_e = min(video.duration, t_s + 1e-6)
    return PredictionRecord(qid=bundle.qid, class_score=float(na_score),
                            decision="accept", span=MomentSpan(t_s, t_e))


def infer_query(params: Mapping[str, np.ndarray], config: ModelConfig,
                clip_feats: np.ndarray, query_emb: np.ndarray,
                video: VideoMeta, qid: str) -> tuple[ScoreBundle, float, PredictionRecord]:
    """One query end to end: score sequences, classification score, prediction."""
    tape = Tape()
    pnodes = params_to_nodes(tape, params)
    graph = forward_graph(tape, pnodes, clip_feats, query_emb, config)
    bundle = ScoreBundle(
        qid=qid,
        indicator=tuple(float(v) for v in graph.indicator.value),
        saliency=tuple(float(v) for v in graph.saliency.value),
        clip_spans=tuple((float(l), float(r)) for l, r in graph.offsets.value),
    )
    score = float(graph.class_score.value)
    return bundle, score, predict(bundle, score, video, config)
