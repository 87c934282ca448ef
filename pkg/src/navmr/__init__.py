"""Negative-aware moment retrieval toolkit.

Samples in-domain/out-of-domain negative queries for moment-retrieval
datasets, trains a rejection head over model score sequences, and evaluates
moment recall jointly with negative-rejection accuracy. Everything operates
on precomputed embeddings; no feature extraction happens here.
"""

__version__ = "0.1.0"

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
)

__all__ = [
    "__version__",
    "EmbeddingTable",
    "LossWeights",
    "MomentSpan",
    "ParseError",
    "PredictionRecord",
    "QueryRecord",
    "ScoreBundle",
    "ValidationError",
    "VideoMeta",
]
