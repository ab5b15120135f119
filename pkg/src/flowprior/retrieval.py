"""Retrieval head, cosine similarity, and the Recall@K evaluation protocol.

Embeddings are plain float vectors; similarity always normalizes internally,
so callers never pre-normalize. Rankings break similarity ties by ascending
item index, which keeps evaluation deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateEmbeddingError, ShapeError
from .numerics import Mlp, mlp_forward, mlp_init

Embedding = np.ndarray


@dataclass
class RetrievalHead:
    """Projection from feature space to the compact retrieval embedding."""

    projector: Mlp

    @property
    def feature_dim(self) -> int:
        return self.projector.in_dim

    @property
    def embed_dim(self) -> int:
        return self.projector.out_dim

    def parameters(self) -> dict[str, np.ndarray]:
        return self.projector.parameters()


def build_head(feature_dim: int, embed_dim: int, rng: np.random.Generator, dtype=np.float64) -> RetrievalHead:
    """Single linear projection; cheap enough to apply to every anchor."""
    return RetrievalHead(mlp_init([feature_dim, embed_dim], rng, dtype=dtype))


def embed(head: RetrievalHead, v: np.ndarray) -> Embedding:
    """Project a feature vector (or batch) into the retrieval space."""
    return mlp_forward(head.projector, v)


def cosine_sim(a: Embedding, b: Embedding) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ShapeError(f"cosine_sim needs two equal-length vectors, got {a.shape} and {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise DegenerateEmbeddingError("cosine similarity of a zero-norm embedding")
    return float(a @ b / (na * nb))


def recall_at_k(embeddings: np.ndarray, labels: np.ndarray, ks) -> dict[int, float]:
    """Average over queries of whether any same-label item ranks in the top k.

    Each item queries the rest of the set (itself excluded). k larger than
    the gallery is clamped to the full gallery. Queries whose class has no
    other member score 0 and are still counted.
    """
    embeddings = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    if embeddings.ndim != 2 or embeddings.shape[0] != labels.shape[0]:
        raise ShapeError(f"embeddings {embeddings.shape} and labels {labels.shape} do not align")
    n = embeddings.shape[0]
    if n < 2:
        raise ValueError("recall_at_k needs at least two items")
    ks = [int(k) for k in ks]
    if not ks or any(k < 1 for k in ks):
        raise ValueError(f"ks must be positive integers, got {ks}")

    norms = np.linalg.norm(embeddings, axis=1)
    if np.any(norms == 0.0):
        raise DegenerateEmbeddingError("recall_at_k received a zero-norm embedding")
    unit = embeddings / norms[:, None]
    sims = unit @ unit.T
    np.fill_diagonal(sims, -np.inf)

    hits = {k: 0 for k in ks}
    kmax = min(max(ks), n - 1)
    for i in range(n):
        order = np.argsort(-sims[i], kind="stable")[:kmax]
        match = labels[order] == labels[i]
        for k in ks:
            if match[: min(k, n - 1)].any():
                hits[k] += 1
    return {k: hits[k] / n for k in ks}
