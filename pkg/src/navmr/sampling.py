"""Negative-query sampling.

In-domain negatives come from shuffling video-sentence pairs: every positive
sentence is reassigned to a different video, optionally restricted to videos
whose sentence-video pseudo-similarity sits in the lowest half for that
sentence (median filter), which guards against accidental false negatives.
Out-of-domain negatives assign sentences from an external pool to videos.

Sampling is a sequential pass so that (inputs, seed) -> output is a pure
function; only :func:`pairwise_cosine` does bulk numeric work.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from navmr.datamodel import (
    EmbeddingTable,
    QueryRecord,
    ValidationError,
    atomic_write_text,
)
from navmr.metrics import percentile


class SamplingError(ValueError):
    """Raised when a negative set cannot be constructed from the inputs."""


@dataclass(frozen=True)
class SimilarityMatrix:
    """Symmetric sentence-sentence cosine similarity matrix."""

    ids: tuple[str, ...]
    values: np.ndarray

    def __post_init__(self) -> None:
        n = len(self.ids)
        if self.values.shape != (n, n):
            raise ValidationError("similarity matrix shape does not match id count")
        if not np.allclose(self.values, self.values.T, atol=1e-12):
            raise ValidationError("similarity matrix must be symmetric")
        if not np.allclose(np.diag(self.values), 1.0, atol=1e-6):
            raise ValidationError("similarity matrix diagonal must be 1")

    def lookup(self, id_a: str, id_b: str) -> float:
        ia = self.ids.index(id_a)
        ib = self.ids.index(id_b)
        return float(self.values[ia, ib])


@dataclass(frozen=True)
class PlanEntry:
    qid: str
    source_vid: str
    assigned_vid: str
    pseudo_similarity: float
    filter_applied: bool


@dataclass(frozen=True)
class AssignmentPlan:
    """Audit record of one in-domain shuffle: which sentence went to which
    video and at what pseudo-similarity."""

    entries: tuple[PlanEntry, ...]
    seed: int

    def __post_init__(self) -> None:
        for e in self.entries:
            if e.assigned_vid == e.source_vid:
                raise ValidationError(f"plan entry {e.qid!r} assigns the source video")


def save_assignment_plan(plan: AssignmentPlan, path: str | Path) -> None:
    lines = [json.dumps({"seed": plan.seed})]
    for e in plan.entries:
        lines.append(json.dumps({
            "qid": e.qid,
            "source_vid": e.source_vid,
            "assigned_vid": e.assigned_vid,
            "pseudo_similarity": e.pseudo_similarity,
            "filter_applied": e.filter_applied,
        }))
    atomic_write_text(path, "\n".join(lines) + "\n")


def load_assignment_plan(path: str | Path) -> AssignmentPlan:
    with open(path, "r", encoding="utf-8") as fh:
        lines = [line for line in fh.read().splitlines() if line.strip()]
    head = json.loads(lines[0])
    entries = tuple(
        PlanEntry(
            qid=obj["qid"],
            source_vid=obj["source_vid"],
            assigned_vid=obj["assigned_vid"],
            pseudo_similarity=float(obj["pseudo_similarity"]),
            filter_applied=bool(obj["filter_applied"]),
        )
        for obj in map(json.loads, lines[1:])
    )
    return AssignmentPlan(entries=entries, seed=int(head["seed"]))


def pairwise_cosine(table: EmbeddingTable) -> SimilarityMatrix:
    """Cosine similarity of every row against every other row.

    Rows are normalised in float64; the result is clipped to [-1, 1] and
    symmetrised to wash out accumulation noise.
    """
    values = table.values.astype(np.float64)
    norms = np.linalg.norm(values, axis=1)
    if np.any(norms == 0.0):
        bad = table.ids[int(np.argmax(norms == 0.0))]
        raise ValidationError(f"zero-norm embedding row {bad!r}")
    unit = values / norms[:, None]
    sim = unit @ unit.T
    sim = np.clip((sim + sim.T) / 2.0, -1.0, 1.0)
    return SimilarityMatrix(ids=tuple(table.ids), values=sim)


def video_pseudo_similarity(
    qid: str,
    vid: str,
    sim: SimilarityMatrix,
    queries: Sequence[QueryRecord],
) -> float:
    """Sentence-video pseudo-similarity: the maximum sentence-sentence
    similarity between ``qid`` and the positive sentences of ``vid``."""
    own = [q.qid for q in queries if q.is_positive and q.vid == vid]
    if not own:
        raise SamplingError(f"video {vid!r} has no positive queries")
    if qid in own:
        raise SamplingError(f"query {qid!r} belongs to video {vid!r}")
    idx = {i: n for n, i in enumerate(sim.ids)}
    row = sim.values[idx[qid]]
    return float(max(row[idx[o]] for o in own))


def sample_id_negatives(
    queries: Sequence[QueryRecord],
    embeddings: EmbeddingTable,
    seed: int,
    apply_percentile_filter: bool = True,
) -> tuple[list[QueryRecord], AssignmentPlan]:
    """Build one in-domain negative per positive query.

    Every positive sentence is assigned, uniformly at random under ``seed``,
    to a video other than its own. With the filter on, the candidate set is
    restricted to videos whose pseudo-similarity to the sentence is at or
    below the median over all other videos; if that set is somehow empty the
    sentence falls back to the globally least-similar video with a warning.
    """
    positives = [q for q in queries if q.is_positive]
    if not positives:
        raise SamplingError("no positive queries to shuffle")
    for q in positives:
        if q.qid not in embeddings:
            raise ValidationError(f"missing embedding for query {q.qid!r}")

    vids: list[str] = []
    for q in positives:
        if q.vid not in vids:
            vids.append(q.vid)
    if len(vids) < 2:
        bad = ", ".join(q.qid for q in positives)
        raise SamplingError(f"need at least 2 videos to shuffle; unassignable qids: {bad}")

    order = [q.qid for q in positives]
    sub = EmbeddingTable(ids=tuple(order),
                         values=np.stack([embeddings.row(q) for q in order]))
    sim = pairwise_cosine(sub)
    idx = {qid: i for i, qid in enumerate(order)}
    vid_members: dict[str, list[int]] = {v: [] for v in vids}
    for q in positives:
        vid_members[q.vid].append(idx[q.qid])

    rng = np.random.default_rng(seed)
    negatives: list[QueryRecord] = []
    entries: list[PlanEntry] = []
    for q in positives:
        row = sim.values[idx[q.qid]]
        candidates = [v for v in vids if v != q.vid]
        psims = np.array([row[vid_members[v]].max() for v in candidates])
        if apply_percentile_filter:
            med = percentile(psims, 50.0)
            eligible = [i for i, s in enumerate(psims) if s <= med]
            if not eligible:  # unreachable with interpolated medians; kept as a guard
                warnings.warn(f"no video passes the similarity filter for {q.qid!r}; "
                              f"falling back to the least-similar video")
                eligible = [int(np.argmin(psims))]
            pick = eligible[int(rng.integers(len(eligible)))]
        else:
            pick = int(rng.integers(len(candidates)))
        assigned = candidates[pick]
        entries.append(PlanEntry(
            qid=q.qid,
            source_vid=q.vid,
            assigned_vid=assigned,
            pseudo_similarity=float(psims[pick]),
            filter_applied=apply_percentile_filter,
        ))
        negatives.append(QueryRecord(
            qid=f"{q.qid}.idneg",
            text=q.text,
            vid=assigned,
            label="negative",
            domain="in_domain",
        ))
    return negatives, AssignmentPlan(entries=tuple(entries), seed=seed)


def sample_ood_assignments(
    pool: Sequence[str],
    videos: Sequence[str],
    target_count: int,
    seed: int,
) -> list[QueryRecord]:
    """Assign out-of-domain pool sentences to videos.

    When the target fits in the pool each sentence is used at most once;
    otherwise sentences are reused but every (sentence, video) pair stays
    unique. Selection is uniform-random under ``seed``.
    """
    if not pool:
        raise SamplingError("empty out-of-domain pool")
    if not videos:
        raise SamplingError("no videos to assign out-of-domain sentences to")
    if target_count < 1:
        raise SamplingError("target_count must be >= 1")
    grid = len(pool) * len(videos)
    if target_count > grid:
        raise SamplingError(
            f"target_count {target_count} exceeds |pool| x |videos| = {grid}")

    rng = np.random.default_rng(seed)
    n_videos = len(videos)
    pairs: list[tuple[int, int]] = []
    if target_count <= len(pool):
        sentence_ids = rng.choice(len(pool), size=target_count, replace=False)
        for si in sentence_ids:
            pairs.append((int(si), int(rng.integers(n_videos))))
    elif target_count > grid // 2:
        flat = rng.permutation(grid)[:target_count]
        pairs = [(int(k) // n_videos, int(k) % n_videos) for k in flat]
    else:
        seen: set[tuple[int, int]] = set()
        while len(pairs) < target_count:
            cand = (int(rng.integers(len(pool))), int(rng.integers(n_videos)))
            if cand not in seen:
                seen.add(cand)
                pairs.append(cand)

    return [
        QueryRecord(
            qid=f"oodneg-{k:05d}",
            text=pool[si],
            vid=videos[vi],
            label="negative",
            domain="out_of_domain",
        )
        for k, (si, vi) in enumerate(pairs)
    ]


def load_ood_pool(path: str | Path) -> list[str]:
    """Read an out-of-domain sentence pool: plain UTF-8, one sentence per line."""
    with open(path, "r", encoding="utf-8") as fh:
        return [line.strip() for line in fh if line.strip()]


def save_ood_pool(sentences: Sequence[str], path: str | Path) -> None:
    atomic_write_text(path, "\n".join(sentences) + ("\n" if sentences else ""))
