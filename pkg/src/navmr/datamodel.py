"""Domain types and on-disk formats.

Holds the record types shared by every other module (videos, queries,
embedding tables, score bundles, predictions, loss weights) and the
loaders/savers for their file formats:

* query / video / prediction / score files: line-delimited JSON, UTF-8;
* embedding tables: a small binary container (magic ``NAVEMB1\\x00``,
  u32-LE row count, u32-LE dim, length-prefixed ids, f32-LE row-major
  payload) with a headerless CSV fallback (first column id, rest floats).

All types are immutable after construction; loading is single-threaded and
loaded objects are safe to share across workers.
"""

from __future__ import annotations

import csv
import io
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

EMBEDDING_MAGIC = b"NAVEMB1\x00"

LABELS = ("positive", "negative")
DOMAINS = ("none", "in_domain", "out_of_domain")
DECISIONS = ("accept", "reject")


class ParseError(ValueError):
    """A file could not be decoded; the message names file and line."""


class ValidationError(ValueError):
    """A record violates a type invariant; the message names the record id."""


def atomic_write_bytes(path: str | Path, data: bytes) -> None:
    """Write ``data`` to ``path`` via a temp file + rename so readers never
    observe a partially written file."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


@dataclass(frozen=True)
class VideoMeta:
    """One video: id, duration in seconds, and its fixed-length clip grid."""

    vid: str
    duration: float
    n_clips: int
    clip_len: float

    def __post_init__(self) -> None:
        if not self.vid:
            raise ValidationError("video id must be non-empty")
        if not (self.duration > 0 and self.clip_len > 0 and self.n_clips >= 1):
            raise ValidationError(f"video {self.vid!r}: duration, clip_len, n_clips must be positive")
        if self.n_clips * self.clip_len < self.duration:
            raise ValidationError(f"video {self.vid!r}: clips do not cover the duration")
        if (self.n_clips - 1) * self.clip_len >= self.duration:
            raise ValidationError(f"video {self.vid!r}: more clips than the duration needs")

    def clip_center(self, c: int) -> float:
        return (c + 0.5) * self.clip_len


@dataclass(frozen=True)
class MomentSpan:
    """A [start, end) interval in seconds.

    Ordering and fit within the owning video are checked by
    :func:`validate_dataset`, not at construction, so that malformed data
    can be loaded and reported rather than rejected piecemeal.
    """

    t_s: float
    t_e: float

    def as_list(self) -> list[float]:
        return [float(self.t_s), float(self.t_e)]


@dataclass(frozen=True)
class QueryRecord:
    """A positive query (with ground-truth spans) or a sampled negative.

    Invariants enforced at construction:

    * positive => domain ``none`` and at least one span;
    * negative => domain ``in_domain``/``out_of_domain`` and no spans.
    """

    qid: str
    text: str
    vid: str
    label: str
    domain: str = "none"
    spans: tuple[MomentSpan, ...] = ()
    gt_saliency: tuple[float, ...] | None = None

    def __post_init__(self) -> None:
        if self.label not in LABELS:
            raise ValidationError(f"query {self.qid!r}: unknown label {self.label!r}")
        if self.domain not in DOMAINS:
            raise ValidationError(f"query {self.qid!r}: unknown domain {self.domain!r}")
        if self.label == "positive":
            if self.domain != "none":
                raise ValidationError(f"query {self.qid!r}: positive queries take domain 'none'")
            if not self.spans:
                raise ValidationError(f"query {self.qid!r}: positive query without spans")
        else:
            if self.domain == "none":
                raise ValidationError(f"query {self.qid!r}: negative query needs a domain")
            if self.spans:
                raise ValidationError(f"query {self.qid!r}: negative query must not carry spans")
        if self.gt_saliency is not None:
            for v in self.gt_saliency:
                if not (0.0 <= v <= 1.0):
                    raise ValidationError(f"query {self.qid!r}: gt_saliency value {v} outside [0, 1]")

    @property
    def is_positive(self) -> bool:
        return self.label == "positive"


@dataclass
class EmbeddingTable:
    """Dense float32 feature rows keyed by string id.

    Rows are stored row-major as ``(len(ids), dim)``. Ids must be unique and
    no row may be all-zero (zero rows make cosine similarity undefined).
    The value matrix is locked read-only after construction.
    """

    ids: tuple[str, ...]
    values: np.ndarray
    _index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        self.values = np.ascontiguousarray(self.values, dtype=np.float32)
        if self.values.ndim != 2:
            raise ValidationError("embedding values must be a 2-D matrix")
        if self.values.shape[0] != len(self.ids):
            raise ValidationError("embedding row count does not match id count")
        if self.values.shape[1] < 1:
            raise ValidationError("embedding dim must be >= 1")
        self._index = {}
        for i, eid in enumerate(self.ids):
            if eid in self._index:
                raise ValidationError(f"duplicate embedding id {eid!r}")
            self._index[eid] = i
        zero = ~np.any(self.values != 0.0, axis=1)
        if np.any(zero):
            bad = self.ids[int(np.argmax(zero))]
            raise ValidationError(f"embedding row {bad!r} is all-zero")
        self.values.flags.writeable = False

    @property
    def dim(self) -> int:
        return int(self.values.shape[1])

    def __len__(self) -> int:
        return len(self.ids)

    def __contains__(self, eid: str) -> bool:
        return eid in self._index

    def row(self, eid: str) -> np.ndarray:
        try:
            return self.values[self._index[eid]]
        except KeyError:
            raise KeyError(f"no embedding for id {eid!r}") from None


@dataclass(frozen=True)
class ScoreBundle:
    """Per-query model outputs: indicator sequence, saliency sequence and
    per-clip (left, right) span offsets in seconds.

    Saliency and clip_spans always have the video clip count; the indicator
    sequence may be longer under the concatenation head variant.
    """

    qid: str
    indicator: tuple[float, ...]
    saliency: tuple[float, ...]
    clip_spans: tuple[tuple[float, float], ...]

    def __post_init__(self) -> None:
        if len(self.saliency) != len(self.clip_spans):
            raise ValidationError(f"bundle {self.qid!r}: saliency/clip_spans length mismatch")
        if not self.indicator:
            raise ValidationError(f"bundle {self.qid!r}: empty indicator sequence")
        for v in self.indicator:
            if not (0.0 <= v <= 1.0):
                raise ValidationError(f"bundle {self.qid!r}: indicator value {v} outside [0, 1]")
        for left, right in self.clip_spans:
            if left < 0 or right < 0:
                raise ValidationError(f"bundle {self.qid!r}: negative span offset")


@dataclass(frozen=True)
class PredictionRecord:
    """Final per-query output: classification score, accept/reject decision
    and, on accept only, the predicted moment span."""

    qid: str
    class_score: float
    decision: str
    span: MomentSpan | None = None

    def __post_init__(self) -> None:
        if self.decision not in DECISIONS:
            raise ValidationError(f"prediction {self.qid!r}: unknown decision {self.decision!r}")
        if not (0.0 <= self.class_score <= 1.0):
            raise ValidationError(f"prediction {self.qid!r}: class_score outside [0, 1]")
        if (self.decision == "accept") != (self.span is not None):
            raise ValidationError(f"prediction {self.qid!r}: span present iff decision is accept")


@dataclass(frozen=True)
class LossWeights:
    """All loss weightings for the training objective.

    ``lambda_pos`` / ``lambda_id`` / ``lambda_ood`` weight the per-domain
    batch losses; the others weight individual terms inside each query loss.
    ``lambda_s_neg`` defaults to ``lambda_s`` when constructed via
    :meth:`defaults`.
    """

    lambda_p: float = 1.0
    lambda_pos: float = 1.0
    lambda_id: float = 0.1
    lambda_ood: float = 0.1
    lambda_f: float = 1.0
    lambda_b: float = 1.0
    lambda_s: float = 1.0
    lambda_s_neg: float = 1.0

    def __post_init__(self) -> None:
        for name in ("lambda_p", "lambda_pos", "lambda_id", "lambda_ood",
                     "lambda_f", "lambda_b", "lambda_s", "lambda_s_neg"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValidationError(f"loss weight {name} must be finite and >= 0, got {v}")

    @classmethod
    def defaults(cls, **overrides: float) -> "LossWeights":
        if "lambda_s_neg" not in overrides and "lambda_s" in overrides:
            overrides["lambda_s_neg"] = overrides["lambda_s"]
        return cls(**overrides)


def clip_id(vid: str, c: int) -> str:
    """Canonical id of clip ``c`` of video ``vid`` inside a clip embedding table."""
    return f"{vid}:{c:04d}"


# ---------------------------------------------------------------------------
# line-delimited JSON formats
# ---------------------------------------------------------------------------


def _json_lines(path: str | Path) -> Iterable[tuple[int, dict]]:
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}:{lineno}: malformed record: {exc}") from None
            if not isinstance(obj, dict):
                raise ParseError(f"{path}:{lineno}: expected an object per line")
            yield lineno, obj


def load_query_set(path: str | Path) -> list[QueryRecord]:
    """Load a line-delimited query file, preserving file order.

    Raises :class:`ParseError` for malformed lines (naming the line number)
    and :class:`ValidationError` when a record violates the query invariants
    (naming the qid).
    """
    records: list[QueryRecord] = []
    seen: set[str] = set()
    for lineno, obj in _json_lines(path):
        try:
            qid = obj["qid"]
            text = obj["text"]
            vid = obj["vid"]
            label = obj["label"]
        except KeyError as exc:
            raise ParseError(f"{path}:{lineno}: missing field {exc.args[0]!r}") from None
        domain = obj.get("domain", "none")
        raw_spans = obj.get("spans", [])
        try:
            spans = tuple(MomentSpan(float(s[0]), float(s[1])) for s in raw_spans)
        except (TypeError, ValueError, IndexError):
            raise ParseError(f"{path}:{lineno}: spans must be [start, end] pairs") from None
        sal = obj.get("gt_saliency")
        gt_saliency = tuple(float(v) for v in sal) if sal is not None else None
        if qid in seen:
            raise ParseError(f"{path}:{lineno}: duplicate qid {qid!r}")
        seen.add(qid)
        records.append(QueryRecord(qid=qid, text=text, vid=vid, label=label,
                                   domain=domain, spans=spans, gt_saliency=gt_saliency))
    return records


def save_query_set(records: Sequence[QueryRecord], path: str | Path) -> None:
    lines = []
    for r in records:
        obj: dict = {
            "qid": r.qid,
            "text": r.text,
            "vid": r.vid,
            "label": r.label,
            "domain": r.domain,
            "spans": [s.as_list() for s in r.spans],
        }
        if r.gt_saliency is not None:
            obj["gt_saliency"] = list(r.gt_saliency)
        lines.append(json.dumps(obj, ensure_ascii=False))
    atomic_write_text(path, "\n".join(lines) + ("\n" if lines else ""))


def load_videos(path: str | Path) -> dict[str, VideoMeta]:
    videos: dict[str, VideoMeta] = {}
    for lineno, obj in _json_lines(path):
        try:
            meta = VideoMeta(vid=obj["vid"], duration=float(obj["duration"]),
                             n_clips=int(obj["n_clips"]), clip_len=float(obj["clip_len"]))
        except KeyError as exc:
            raise ParseError(f"{path}:{lineno}: missing field {exc.args[0]!r}") from None
        if meta.vid in videos:
            raise ParseError(f"{path}:{lineno}: duplicate vid {meta.vid!r}")
        videos[meta.vid] = meta
    return videos


def save_videos(videos: Iterable[VideoMeta], path: str | Path) -> None:
    lines = [
        json.dumps({"vid": v.vid, "duration": v.duration,
                    "n_clips": v.n_clips, "clip_len": v.clip_len})
        for v in videos
    ]
    atomic_write_text(path, "\n".join(lines) + ("\n" if lines else ""))


def load_predictions(path: str | Path) -> list[PredictionRecord]:
    records = []
    for lineno, obj in _json_lines(path):
        span = obj.get("span")
        records.append(PredictionRecord(
            qid=obj["qid"],
            class_score=float(obj["class_score"]),
            decision=obj["decision"],
            span=MomentSpan(float(span[0]), float(span[1])) if span is not None else None,
        ))
    return records


def save_predictions(records: Sequence[PredictionRecord], path: str | Path) -> None:
    lines = []
    for r in records:
        obj = {
            "qid": r.qid,
            "class_score": r.class_score,
            "decision": r.decision,
            "span": r.span.as_list() if r.span is not None else None,
        }
        lines.append(json.dumps(obj))
    atomic_write_text(path, "\n".join(lines) + ("\n" if lines else ""))


def load_score_bundles(path: str | Path) -> list[ScoreBundle]:
    bundles = []
    for lineno, obj in _json_lines(path):
        bundles.append(ScoreBundle(
            qid=obj["qid"],
            indicator=tuple(float(v) for v in obj["indicator"]),
            saliency=tuple(float(v) for v in obj["saliency"]),
            clip_spans=tuple((float(a), float(b)) for a, b in obj["clip_spans"]),
        ))
    return bundles


def save_score_bundles(bundles: Sequence[ScoreBundle], path: str | Path) -> None:
    lines = []
    for b in bundles:
        obj = {
            "qid": b.qid,
            "indicator": list(b.indicator),
            "saliency": list(b.saliency),
            "clip_spans": [[a, b_] for a, b_ in b.clip_spans],
        }
        lines.append(json.dumps(obj))
    atomic_write_text(path, "\n".join(lines) + ("\n" if lines else ""))


# ---------------------------------------------------------------------------
# embedding container
# ---------------------------------------------------------------------------


def save_embeddings(table: EmbeddingTable, path: str | Path) -> None:
    """Write the binary container, or headerless CSV when the path ends in .csv."""
    path = Path(path)
    if path.suffix == ".csv":
        buf = io.StringIO()
        writer = csv.writer(buf)
        for eid, row in zip(table.ids, table.values):
            writer.writerow([eid] + [f"{float(v):.9g}" for v in row])
        atomic_write_text(path, buf.getvalue())
        return
    out = bytearray()
    out += EMBEDDING_MAGIC
    out += struct.pack("<II", len(table.ids), table.dim)
    for eid in table.ids:
        raw = eid.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValidationError(f"embedding id too long: {eid[:32]!r}...")
        out += struct.pack("<H", len(raw))
        out += raw
    out += np.ascontiguousarray(table.values, dtype="<f4").tobytes()
    atomic_write_bytes(path, bytes(out))


def load_embeddings(path: str | Path) -> EmbeddingTable:
    """Read an embedding table; the format is sniffed from the magic bytes,
    anything else is parsed as the CSV fallback."""
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(len(EMBEDDING_MAGIC))
        if head != EMBEDDING_MAGIC:
            return _load_embeddings_csv(path)
        meta = fh.read(8)
        if len(meta) != 8:
            raise ParseError(f"{path}: truncated header")
        count, dim = struct.unpack("<II", meta)
        ids = []
        for i in range(count):
            raw_len = fh.read(2)
            if len(raw_len) != 2:
                raise ParseError(f"{path}: truncated id block at id {i}")
            (n,) = struct.unpack("<H", raw_len)
            raw = fh.read(n)
            if len(raw) != n:
                raise ParseError(f"{path}: truncated id block at id {i}")
            ids.append(raw.decode("utf-8"))
        payload = fh.read()
        expected = count * dim * 4
        if len(payload) != expected:
            raise ParseError(f"{path}: payload is {len(payload)} bytes, expected {expected}")
        values = np.frombuffer(payload, dtype="<f4").reshape(count, dim)
    return EmbeddingTable(ids=tuple(ids), values=values.copy())


def _load_embeddings_csv(path: Path) -> EmbeddingTable:
    ids: list[str] = []
    rows: list[list[float]] = []
    try:
        with open(path, "r", encoding="utf-8", newline="") as fh:
            for lineno, row in enumerate(csv.reader(fh), start=1):
                if not row:
                    continue
                if len(row) < 2:
                    raise ParseError(f"{path}:{lineno}: need an id and at least one float")
                try:
                    values = [float(v) for v in row[1:]]
                except ValueError:
                    raise ParseError(f"{path}:{lineno}: non-numeric value") from None
                if rows and len(values) != len(rows[0]):
                    raise ParseError(f"{path}:{lineno}: inconsistent dimension")
                ids.append(row[0])
                rows.append(values)
    except (csv.Error, UnicodeDecodeError) as exc:
        raise ParseError(f"{path}: not a valid embedding file: {exc}") from None
    if not rows:
        raise ParseError(f"{path}: empty embedding file")
    return EmbeddingTable(ids=tuple(ids), values=np.array(rows, dtype=np.float32))


# ---------------------------------------------------------------------------
# dataset-level validation
# ---------------------------------------------------------------------------


def validate_dataset(
    queries: Sequence[QueryRecord],
    videos: dict[str, VideoMeta],
    embeddings: EmbeddingTable | None = None,
    clip_embeddings: EmbeddingTable | None = None,
) -> list[str]:
    """Cross-check a loaded dataset; returns a list of problem descriptions.

    An empty report means the dataset is consistent. Checks: dangling vid
    references, missing sentence/clip embeddings, span ordering and fit
    within the video duration, and gt_saliency length.
    """
    report: list[str] = []
    for q in queries:
        video = videos.get(q.vid)
        if video is None:
            report.append(f"dangling-vid: query {q.qid!r} references unknown video {q.vid!r}")
        if embeddings is not None and q.qid not in embeddings:
            report.append(f"missing-embedding: query {q.qid!r} has no sentence embedding")
        for s in q.spans:
            if not (s.t_s < s.t_e):
                report.append(f"span-order: query {q.qid!r} span [{s.t_s}, {s.t_e}]")
            elif s.t_s < 0 or (video is not None and s.t_e > video.duration):
                report.append(f"span-range: query {q.qid!r} span [{s.t_s}, {s.t_e}]")
        if q.gt_saliency is not None and video is not None:
            if len(q.gt_saliency) != video.n_clips:
                report.append(
                    f"saliency-length: query {q.qid!r} has {len(q.gt_saliency)} values, "
                    f"video {q.vid!r} has {video.n_clips} clips"
                )
    if clip_embeddings is not None:
        for vid, video in videos.items():
            missing = [c for c in range(video.n_clips) if clip_id(vid, c) not in clip_embeddings]
            if missing:
                report.append(f"missing-clip-embedding: video {vid!r} lacks clips {missing}")
    return report
