"""Training loop, optimizers, checkpoints, and the synthetic dataset
generator used for desk-scale end-to-end verification.

The generator builds videos as contiguous concept segments: each clip
embedding is its segment's concept prototype plus Gaussian noise, each
positive query is the prototype of one segment (its ground-truth span) plus
noise, and the out-of-domain pool draws from prototypes disjoint from every
video concept. ``concept_separation`` scales the prototypes, so 0 makes
positives and negatives statistically indistinguishable.

Training is a single-threaded sequential loop so that seed -> output is a
pure function. A fifth of the videos (stable hash of the vid) are held out
for the per-epoch validation metrics and never appear in training batches.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np

from navmr import autodiff as ad
from navmr.autodiff import Tape
from navmr.datamodel import (
    EmbeddingTable,
    LossWeights,
    MomentSpan,
    ParseError,
    PredictionRecord,
    QueryRecord,
    ScoreBundle,
    ValidationError,
    VideoMeta,
    atomic_write_bytes,
    clip_id,
    load_embeddings,
    load_query_set,
    load_videos,
)
from navmr.losses import LossBreakdown, SALIENCY_NEG_MODES, total_loss
from navmr.metrics import recall_at_1, rejection_accuracy
from navmr.model import (
    ModelConfig,
    forward_graph,
    param_shapes,
    params_to_nodes,
    predict,
)

CHECKPOINT_FORMAT = "navckpt1"
CLIP_LEN = 2.0


class NonFiniteLossError(RuntimeError):
    """Training produced a non-finite loss; carries a diagnostic dump."""

    def __init__(self, message: str, dump: dict):
        super().__init__(message)
        self.dump = dump


@dataclass(frozen=True)
class TrainConfig:
    batch_pos: int = 32
    batch_id: int = 32
    batch_ood: int = 32
    epochs: int = 40
    learning_rate: float = 3e-3
    optimizer: str = "adam"
    seed: int = 7
    saliency_neg_mode: str = "log"
    weights: LossWeights = field(default_factory=LossWeights.defaults)

    def __post_init__(self) -> None:
        if min(self.batch_pos, self.batch_id, self.batch_ood) < 1:
            raise ValidationError("batch sizes must be >= 1")
        if self.epochs < 0:
            raise ValidationError("epochs must be >= 0")
        # 0 is allowed so a no-op training run stays expressible
        if self.learning_rate < 0:
            raise ValidationError("learning_rate must be >= 0")
        if self.optimizer not in ("sgd", "adam"):
            raise ValidationError(f"unknown optimizer {self.optimizer!r}")
        if self.saliency_neg_mode not in SALIENCY_NEG_MODES:
            raise ValidationError(f"unknown saliency_neg_mode {self.saliency_neg_mode!r}")


@dataclass(frozen=True)
class SyntheticSpec:
    n_videos: int = 20
    clips_per_video: int = 16
    d_feat: int = 32
    n_concepts: int = 16
    concept_separation: float = 4.0
    noise_sigma: float = 0.1
    seed: int = 7
    segments_per_video: int = 3
    queries_per_segment: int = 2

    def __post_init__(self) -> None:
        if self.n_videos < 2:
            raise ValidationError("n_videos must be >= 2")
        if self.clips_per_video < self.segments_per_video:
            raise ValidationError("clips_per_video must cover the segments")
        if self.d_feat < 2:
            raise ValidationError("d_feat must be >= 2")
        if self.n_concepts < 2:
            raise ValidationError("n_concepts must be >= 2")
        if self.concept_separation < 0:
            raise ValidationError("concept_separation must be >= 0")
        if self.noise_sigma < 0:
            raise ValidationError("noise_sigma must be >= 0")
        if self.noise_sigma == 0 and self.concept_separation == 0:
            raise ValidationError("all-zero embeddings: raise noise_sigma or concept_separation")
        if self.segments_per_video < 1 or self.queries_per_segment < 1:
            raise ValidationError("segments_per_video and queries_per_segment must be >= 1")


@dataclass
class SyntheticDataset:
    videos: dict[str, VideoMeta]
    queries: list[QueryRecord]
    clip_table: EmbeddingTable
    sentence_table: EmbeddingTable
    ood_pool: list[str]


def generate_synthetic_dataset(spec: SyntheticSpec) -> SyntheticDataset:
    """Build a fully seeded synthetic dataset.

    Concepts split into a video part and an out-of-domain part; every video
    uses at most ``segments_per_video`` distinct video concepts, so other
    video concepts remain available as in-domain foils, and the pool uses
    only the out-of-domain part.
    """
    n_ood_concepts = max(1, spec.n_concepts // 4)
    n_video_concepts = spec.n_concepts - n_ood_concepts
    if n_video_concepts < 2:
        raise ValidationError(
            f"n_concepts={spec.n_concepts} too small to keep in-domain and "
            f"out-of-domain concepts disjoint")

    rng = np.random.default_rng(spec.seed)
    directions = rng.normal(size=(spec.n_concepts, spec.d_feat))
    directions /= np.linalg.norm(directions, axis=1)[:, None]
    prototypes = spec.concept_separation * directions
    video_concepts = list(range(n_video_concepts))
    ood_concepts = list(range(n_video_concepts, spec.n_concepts))

    def noisy(proto: np.ndarray) -> np.ndarray:
        return proto + spec.noise_sigma * rng.normal(size=spec.d_feat)

    videos: dict[str, VideoMeta] = {}
    queries: list[QueryRecord] = []
    clip_ids: list[str] = []
    clip_rows: list[np.ndarray] = []
    sent_ids: list[str] = []
    sent_rows: list[np.ndarray] = []

    for v in range(spec.n_videos):
        vid = f"v{v:03d}"
        duration = spec.clips_per_video * CLIP_LEN
        videos[vid] = VideoMeta(vid=vid, duration=duration,
                                n_clips=spec.clips_per_video, clip_len=CLIP_LEN)
        # contiguous segments with distinct concepts
        n_seg = spec.segments_per_video
        cuts = sorted(rng.choice(np.arange(1, spec.clips_per_video), size=n_seg - 1,
                                 replace=False).tolist()) if n_seg > 1 else []
        bounds = [0] + cuts + [spec.clips_per_video]
        concepts = rng.choice(video_concepts, size=n_seg,
                              replace=n_seg > len(video_concepts))
        for s in range(n_seg):
            proto = prototypes[concepts[s]]
            for c in range(bounds[s], bounds[s + 1]):
                clip_ids.append(clip_id(vid, c))
                clip_rows.append(noisy(proto))
            span = MomentSpan(bounds[s] * CLIP_LEN, bounds[s + 1] * CLIP_LEN)
            for j in range(spec.queries_per_segment):
                qid = f"{vid}-q{s}{j}"
                queries.append(QueryRecord(
                    qid=qid,
                    text=f"activity of kind {int(concepts[s])} shown in {vid} part {s}",
                    vid=vid, label="positive", spans=(span,),
                ))
                sent_ids.append(qid)
                sent_rows.append(noisy(proto))

    pool_size = 2 * len(queries)
    ood_pool: list[str] = []
    for i in range(pool_size):
        concept = ood_concepts[i % len(ood_concepts)]
        ood_pool.append(f"unrelated activity {i:05d} of kind {int(concept)}")
        sent_ids.append(f"ood:{i:05d}")
        sent_rows.append(noisy(prototypes[concept]))

    clip_table = EmbeddingTable(ids=tuple(clip_ids),
                                values=np.array(clip_rows, dtype=np.float32))
    sentence_table = EmbeddingTable(ids=tuple(sent_ids),
                                    values=np.array(sent_rows, dtype=np.float32))
    return SyntheticDataset(videos=videos, queries=queries, clip_table=clip_table,
                            sentence_table=sentence_table, ood_pool=ood_pool)


def is_validation_vid(vid: str) -> bool:
    """Stable 20% hold-out: smallest residue class of the vid's sha1."""
    digest = hashlib.sha1(vid.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") % 5 == 4


def pool_sentence_id(index: int) -> str:
    return f"ood:{index:05d}"


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------


def embedding_key(qid: str) -> str:
    """Resolve a (possibly re-assigned) query id to its embedding row id."""
    return qid.split("~", 1)[0]


def make_batches(
    queries: Sequence[QueryRecord],
    config: TrainConfig,
    epoch_seed: int,
) -> Iterator[tuple[list[QueryRecord], list[QueryRecord], list[QueryRecord]]]:
    """Yield (positive, in-domain, out-of-domain) batches for one epoch.

    Positives are shuffled each epoch and set the batch count (the last
    partial batch is dropped). When a negative split cannot fill its quota
    it is recycled: in-domain negatives repeat unchanged, out-of-domain
    sentences are re-assigned to a fresh random video, keeping every
    (sentence, video) pair unique within the epoch.
    """
    positives = [q for q in queries if q.is_positive]
    id_negs = [q for q in queries if q.label == "negative" and q.domain == "in_domain"]
    ood_negs = [q for q in queries if q.label == "negative" and q.domain == "out_of_domain"]
    if not positives or not id_negs or not ood_negs:
        raise ValidationError("each of the positive/in-domain/out-of-domain splits "
                              "must be non-empty")
    n_batches = len(positives) // config.batch_pos
    if n_batches == 0:
        raise ValidationError(
            f"{len(positives)} positives cannot fill one batch of {config.batch_pos}")

    rng = np.random.default_rng(epoch_seed)
    pos_order = [positives[i] for i in rng.permutation(len(positives))]

    def cycle_shuffled(items: list[QueryRecord], needed: int) -> list[QueryRecord]:
        out: list[QueryRecord] = []
        while len(out) < needed:
            out.extend(items[i] for i in rng.permutation(len(items)))
        return out[:needed]

    id_stream = cycle_shuffled(id_negs, n_batches * config.batch_id)

    needed_ood = n_batches * config.batch_ood
    vids: list[str] = []
    for q in positives:
        if q.vid not in vids:
            vids.append(q.vid)
    ood_stream: list[QueryRecord] = []
    # originals keep their (sentence, video) pair; register all of them first
    # so re-assigned repeats can never collide with an original pair
    used_pairs: set[tuple[str, str]] = {(q.text, q.vid) for q in ood_negs}
    occurrence: dict[str, int] = {}
    base_stream = cycle_shuffled(ood_negs, needed_ood)
    for q in base_stream:
        occ = occurrence.get(q.qid, 0)
        occurrence[q.qid] = occ + 1
        if occ == 0:
            ood_stream.append(q)
            continue
        # repeated sentence: give it a fresh random video, unique pair
        for _ in range(1000):
            new_vid = vids[int(rng.integers(len(vids)))]
            if (q.text, new_vid) not in used_pairs:
                used_pairs.add((q.text, new_vid))
                ood_stream.append(replace(q, qid=f"{q.qid}~{occ}", vid=new_vid))
                break
        else:
            raise ValidationError(
                f"cannot find a fresh video for repeated sentence of {q.qid!r}")

    for b in range(n_batches):
        yield (
            pos_order[b * config.batch_pos:(b + 1) * config.batch_pos],
            id_stream[b * config.batch_id:(b + 1) * config.batch_id],
            ood_stream[b * config.batch_ood:(b + 1) * config.batch_ood],
        )


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------


class Sgd:
    def __init__(self, learning_rate: float):
        self.learning_rate = learning_rate

    def step(self, params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> None:
        for name in params:
            params[name] -= self.learning_rate * grads[name]


class Adam:
    def __init__(self, learning_rate: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.learning_rate = learning_rate
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name in params:
            g = grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(params[name])
                self.v[name] = np.zeros_like(params[name])
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            m_hat = self.m[name] / (1 - b1 ** self.t)
            v_hat = self.v[name] / (1 - b2 ** self.t)
            params[name] -= self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(config: TrainConfig) -> Sgd | Adam:
    if config.optimizer == "sgd":
        return Sgd(config.learning_rate)
    return Adam(config.learning_rate)


# ---------------------------------------------------------------------------
# dataset container
# ---------------------------------------------------------------------------


@dataclass
class TrainData:
    """Everything one run needs, with per-video clip matrices cached."""

    videos: dict[str, VideoMeta]
    positives: list[QueryRecord]
    id_negatives: list[QueryRecord]
    ood_negatives: list[QueryRecord]
    clip_table: EmbeddingTable
    sentence_table: EmbeddingTable
    _clip_cache: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    @property
    def all_queries(self) -> list[QueryRecord]:
        return self.positives + self.id_negatives + self.ood_negatives

    def clip_matrix(self, vid: str) -> np.ndarray:
        if vid not in self._clip_cache:
            video = self.videos[vid]
            rows = [self.clip_table.row(clip_id(vid, c)) for c in range(video.n_clips)]
            self._clip_cache[vid] = np.array(rows, dtype=np.float64)
        return self._clip_cache[vid]

    def query_embedding(self, qid: str) -> np.ndarray:
        return self.sentence_table.row(embedding_key(qid)).astype(np.float64)


DATA_FILES = {
    "videos": "videos.jsonl",
    "queries_pos": "queries_pos.jsonl",
    "negatives_id": "negatives_id.jsonl",
    "negatives_ood": "negatives_ood.jsonl",
    "clip_embeddings": "clip_embeddings.navemb",
    "sentence_embeddings": "sentence_embeddings.navemb",
    "ood_pool": "ood_pool.txt",
}


def load_data_dir(path: str | Path, require_negatives: bool = False) -> TrainData:
    """Load a dataset directory; negative files are optional unless training."""
    path = Path(path)
    videos = load_videos(path / DATA_FILES["videos"])
    positives = load_query_set(path / DATA_FILES["queries_pos"])
    id_path = path / DATA_FILES["negatives_id"]
    ood_path = path / DATA_FILES["negatives_ood"]
    id_negatives = load_query_set(id_path) if id_path.exists() else []
    ood_negatives = load_query_set(ood_path) if ood_path.exists() else []
    if require_negatives and (not id_negatives or not ood_negatives):
        raise ValidationError(f"{path}: training needs negatives_id.jsonl and "
                              f"negatives_ood.jsonl (run sample-negatives first)")
    clip_table = load_embeddings(path / DATA_FILES["clip_embeddings"])
    sentence_table = load_embeddings(path / DATA_FILES["sentence_embeddings"])
    return TrainData(videos=videos, positives=positives, id_negatives=id_negatives,
                     ood_negatives=ood_negatives, clip_table=clip_table,
                     sentence_table=sentence_table)


# ---------------------------------------------------------------------------
# inference helpers shared by validation metrics and the eval command
# ---------------------------------------------------------------------------


def run_inference(
    params: Mapping[str, np.ndarray],
    model_config: ModelConfig,
    data: TrainData,
    queries: Sequence[QueryRecord],
    rejection: bool = True,
) -> list[tuple[QueryRecord, ScoreBundle, float, PredictionRecord]]:
    """Forward every query; with ``rejection=False`` every prediction is
    accepted (the head score is kept for reference only)."""
    out = []
    for q in queries:
        tape = Tape()
        pnodes = params_to_nodes(tape, params)
        graph = forward_graph(tape, pnodes, data.clip_matrix(q.vid),
                              data.query_embedding(q.qid), model_config)
        bundle = ScoreBundle(
            qid=q.qid,
            indicator=tuple(float(v) for v in graph.indicator.value),
            saliency=tuple(float(v) for v in graph.saliency.value),
            clip_spans=tuple((float(l), float(r)) for l, r in graph.offsets.value),
        )
        score = float(graph.class_score.value)
        video = data.videos[q.vid]
        if rejection:
            pred = predict(bundle, score, video, model_config)
        else:
            forced = predict(bundle, 1.0, video, model_config)
            pred = PredictionRecord(qid=q.qid, class_score=score,
                                    decision="accept", span=forced.span)
        out.append((q, bundle, score, pred))
    return out


@dataclass
class EpochStats:
    epoch: int
    l_tot: float
    l_p: float
    l_f: float
    l_b: float
    l_s: float
    r1_05: float
    ra_id: float
    ra_ood: float


METRICS_HEADER = "epoch,l_tot,l_p,l_f,l_b,l_s,r1_05,ra_id,ra_ood"


def metrics_csv(stats: Sequence[EpochStats]) -> str:
    lines = [METRICS_HEADER]
    for s in stats:
        lines.append(f"{s.epoch},{s.l_tot!r},{s.l_p!r},{s.l_f!r},{s.l_b!r},{s.l_s!r},"
                     f"{s.r1_05!r},{s.ra_id!r},{s.ra_ood!r}")
    return "\n".join(lines) + "\n"


def _validation_metrics(params, model_config, data: TrainData,
                        val_queries: list[QueryRecord]) -> tuple[float, float, float]:
    if not val_queries:
        return (math.nan, math.nan, math.nan)
    results = run_inference(params, model_config, data, val_queries)
    preds = [r[3] for r in results]
    positives = [q for q in val_queries if q.is_positive]
    negatives = [q for q in val_queries if not q.is_positive]
    r1 = recall_at_1(preds, val_queries, 0.5) if positives else math.nan
    ra_id = (rejection_accuracy(preds, negatives, "in_domain")
             if any(q.domain == "in_domain" for q in negatives) else math.nan)
    ra_ood = (rejection_accuracy(preds, negatives, "out_of_domain")
              if any(q.domain == "out_of_domain" for q in negatives) else math.nan)
    return (r1, ra_id, ra_ood)


def train_loop(
    params: dict[str, np.ndarray],
    data: TrainData,
    config: TrainConfig,
    model_config: ModelConfig,
) -> tuple[dict[str, np.ndarray], list[EpochStats]]:
    """Train in place and return (params, per-epoch log).

    Each batch runs every query through the shared forward graph, composes
    the weighted objective, backpropagates once, and applies one optimizer
    step. Aborts with :class:`NonFiniteLossError` (and a diagnostic dump of
    the offending batch) if the loss leaves the finite range.
    """
    train_q = [q for q in data.all_queries if not is_validation_vid(q.vid)]
    val_q = [q for q in data.all_queries if is_validation_vid(q.vid)]
    optimizer = make_optimizer(config)
    log: list[EpochStats] = []

    for epoch in range(config.epochs):
        epoch_seed = int(np.random.SeedSequence([config.seed, epoch]).generate_state(1)[0])
        sums = {"l_tot": 0.0, "l_p": 0.0, "l_f": 0.0, "l_b": 0.0, "l_s": 0.0}
        n_batches = 0
        for pos, idn, ood in make_batches(train_q, config, epoch_seed):
            tape = Tape()
            pnodes = params_to_nodes(tape, params)
            batches = {"positive": [], "in_domain": [], "out_of_domain": []}
            for domain, batch in (("positive", pos), ("in_domain", idn),
                                  ("out_of_domain", ood)):
                for q in batch:
                    graph = forward_graph(tape, pnodes, data.clip_matrix(q.vid),
                                          data.query_embedding(q.qid), model_config)
                    batches[domain].append((graph, q, data.videos[q.vid]))
            breakdown, loss_node = total_loss(tape, batches, config.weights,
                                              config.saliency_neg_mode)
            if not np.isfinite(breakdown.total):
                dump = {
                    "epoch": epoch,
                    "batch_qids": {d: [q.qid for q in b] for d, b in
                                   (("positive", pos), ("in_domain", idn),
                                    ("out_of_domain", ood))},
                    "breakdown": {"l_p": breakdown.l_p, "l_f": breakdown.l_f,
                                  "l_b": breakdown.l_b, "l_s": breakdown.l_s,
                                  "total": breakdown.total},
                }
                raise NonFiniteLossError(
                    f"non-finite loss {breakdown.total} at epoch {epoch}", dump)
            ad.backward(tape, loss_node)
            grads = {name: pnodes[name].grad for name in params}
            optimizer.step(params, grads)
            sums["l_tot"] += breakdown.total
            sums["l_p"] += breakdown.l_p
            sums["l_f"] += breakdown.l_f
            sums["l_b"] += breakdown.l_b
            sums["l_s"] += breakdown.l_s
            n_batches += 1

        r1, ra_id, ra_ood = _validation_metrics(params, model_config, data, val_q)
        log.append(EpochStats(
            epoch=epoch,
            l_tot=sums["l_tot"] / n_batches, l_p=sums["l_p"] / n_batches,
            l_f=sums["l_f"] / n_batches, l_b=sums["l_b"] / n_batches,
            l_s=sums["l_s"] / n_batches,
            r1_05=r1, ra_id=ra_id, ra_ood=ra_ood,
        ))
    return params, log


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(params: Mapping[str, np.ndarray], model_config: ModelConfig,
                    path: str | Path, seed: int = 0, epoch: int = 0) -> None:
    """One JSON header line (config, shapes, seed, epoch) + f64-LE blob."""
    shapes = param_shapes(model_config)
    header = {
        "format": CHECKPOINT_FORMAT,
        "config": {
            "d_feat": model_config.d_feat,
            "d_hidden": model_config.d_hidden,
            "combine": model_config.combine,
            "decision_threshold": model_config.decision_threshold,
        },
        "order": list(shapes.keys()),
        "shapes": {name: list(shape) for name, shape in shapes.items()},
        "seed": seed,
        "epoch": epoch,
    }
    blob = b"".join(np.ascontiguousarray(params[name], dtype="<f8").tobytes()
                    for name in shapes)
    atomic_write_bytes(path, json.dumps(header, sort_keys=True).encode("utf-8")
                       + b"\n" + blob)


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], ModelConfig, dict]:
    """Returns (params, model config, header metadata); validates shapes."""
    raw = Path(path).read_bytes()
    newline = raw.find(b"\n")
    if newline < 0:
        raise ParseError(f"{path}: missing checkpoint header")
    try:
        header = json.loads(raw[:newline].decode("utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ParseError(f"{path}: bad checkpoint header: {exc}") from None
    if header.get("format") != CHECKPOINT_FORMAT:
        raise ParseError(f"{path}: not a checkpoint file")
    cfg = header["config"]
    model_config = ModelConfig(d_feat=int(cfg["d_feat"]), d_hidden=int(cfg["d_hidden"]),
                               combine=cfg["combine"],
                               decision_threshold=float(cfg["decision_threshold"]))
    expected = param_shapes(model_config)
    if list(header["order"]) != list(expected.keys()):
        raise ValidationError(f"{path}: unexpected tensor order {header['order']}")
    for name, shape in header["shapes"].items():
        if tuple(shape) != expected[name]:
            raise ValidationError(
                f"{path}: tensor {name!r} has shape {tuple(shape)}, "
                f"expected {expected[name]} for this config")
    blob = raw[newline + 1:]
    total = sum(int(np.prod(s)) if s else 1 for s in
                (expected[name] for name in expected))
    if len(blob) != total * 8:
        raise ParseError(f"{path}: parameter blob is {len(blob)} bytes, "
                         f"expected {total * 8}")
    params: dict[str, np.ndarray] = {}
    offset = 0
    for name, shape in expected.items():
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=offset * 8)
        params[name] = arr.reshape(shape).astype(np.float64)
        offset += n
    return params, model_config, {"seed": header["seed"], "epoch": header["epoch"]}
