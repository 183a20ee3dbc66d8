"""Exact (brute-force) cosine retrieval over an embedded corpus."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_documents, check_positive_int, check_queries

ALL = None


@dataclass(frozen=True)
class RankedList:
    """Ordered ``(doc_id, score)`` pairs: scores non-increasing, ties by id ascending."""

    probe_label: str
    entries: tuple

    def __post_init__(self):
        entries = tuple((str(d), float(s)) for d, s in self.entries)
        seen = set()
        for i, (doc_id, score) in enumerate(entries):
            if doc_id in seen:
                raise ValueError(f"duplicate document {doc_id!r} in ranked list")
            seen.add(doc_id)
            if i:
                prev_id, prev_score = entries[i - 1]
                if score > prev_score or (score == prev_score and doc_id < prev_id):
                    raise ValueError(f"ranked list out of order at position {i + 1}")
        object.__setattr__(self, "entries", entries)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def doc_ids(self) -> list[str]:
        return [d for d, _ in self.entries]

    def top(self, k) -> "RankedList":
        return RankedList(self.probe_label, self.entries[:k])

    @classmethod
    def from_scores(cls, label, scores: dict, depth=ALL) -> "RankedList":
        items = sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))
        if depth is not None:
            items = items[:depth]
        return cls(label, tuple(items))


@dataclass(frozen=True)
class CorpusIndex:
    doc_ids: tuple
    matrix: np.ndarray
    embedder_id: str = "unknown"

    def __post_init__(self):
        matrix = np.asarray(self.matrix, dtype=np.float64)
        if matrix.ndim != 2 or matrix.shape[0] != len(self.doc_ids):
            raise ValueError("matrix rows must match doc_ids")
        if len(set(self.doc_ids)) != len(self.doc_ids):
            raise ValueError("duplicate doc ids in index")
        matrix = _normalize_rows(matrix)
        matrix.setflags(write=False)
        object.__setattr__(self, "doc_ids", tuple(self.doc_ids))
        object.__setattr__(self, "matrix", matrix)
        # position of each row in id-sorted order, used as the tiebreak key
        order = np.argsort(np.array(self.doc_ids, dtype=object), kind="stable")
        id_rank = np.empty(len(order), dtype=np.int64)
        id_rank[order] = np.arange(len(order))
        object.__setattr__(self, "_id_rank", id_rank)

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def __len__(self):
        return len(self.doc_ids)

    def save(self, directory):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        manifest = {"dim": self.dim, "count": len(self), "embedder": self.embedder_id,
                    "dtype": "<f4", "order": "row-major"}
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        self.matrix.astype("<f4").tofile(directory / "matrix.f32")
        (directory / "doc_ids.txt").write_text("".join(f"{d}\n" for d in self.doc_ids), encoding="utf-8")

    @classmethod
    def load(cls, directory) -> "CorpusIndex":
        directory = Path(directory)
        manifest = json.loads((directory / "manifest.json").read_text())
        doc_ids = (directory / "doc_ids.txt").read_text(encoding="utf-8").splitlines()
        flat = np.fromfile(directory / "matrix.f32", dtype="<f4")
        if len(doc_ids) != manifest["count"] or flat.size != manifest["count"] * manifest["dim"]:
            raise ValueError(f"index files in {directory} disagree with manifest")
        matrix = flat.reshape(manifest["count"], manifest["dim"]).astype(np.float64)
        return cls(tuple(doc_ids), matrix, manifest.get("embedder", "unknown"))


def _normalize_rows(matrix):
    norms = np.linalg.norm(matrix, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("zero embedding row cannot be normalised")
    return matrix / norms


def build_index(docs: Sequence, embedder) -> CorpusIndex:
    if not docs:
        raise ValueError("cannot index an empty corpus")
    matrix = embedder.embed([d.retrieval_text for d in docs])
    return CorpusIndex(tuple(d.id for d in docs), matrix, getattr(embedder, "identifier", "unknown"))


def cosine(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine undefined for a zero vector")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def rank_all(probe, idx: CorpusIndex, depth: Optional[int] = ALL, label: str = "") -> RankedList:
    """Rank every indexed document by cosine similarity to ``probe``."""
    probe = np.asarray(probe, dtype=np.float64)
    if probe.shape != (idx.dim,):
        raise ValueError(f"probe dimension {probe.shape} does not match index dim {idx.dim}")
    norm = np.linalg.norm(probe)
    if norm == 0:
        raise ValueError("probe vector is zero")
    if depth is not None and depth < 1:
        raise ValueError("depth must be positive or ALL")
    scores = np.clip(idx.matrix @ (probe / norm), -1.0, 1.0)
    order = np.lexsort((idx._id_rank, -scores))
    if depth is not None:
        order = order[:depth]
    return RankedList(label, tuple((idx.doc_ids[i], float(scores[i])) for i in order))


class DenseRetriever(BaseEstimator):
    """Estimator front-end: ``fit`` embeds a corpus, ``predict`` ranks it for each query.

    Parameters
    ----------
    embedder : Embedder, optional
        Defaults to a cached :class:`~moler.backends.OfflineEmbedder`.
    depth : int or None
        Ranked-list depth; ``None`` ranks the whole corpus.
    """

    def __init__(self, embedder=None, depth=None):
        self.embedder = embedder
        self.depth = depth

    def fit(self, X, y=None):
        check_positive_int(self.depth, "depth", allow_none=True)
        if self.embedder is None:
            from .backends import CachedEmbedder, OfflineEmbedder
            self.embedder_ = CachedEmbedder(OfflineEmbedder())
        else:
            self.embedder_ = self.embedder
        self.index_ = build_index(check_documents(X), self.embedder_)
        self.n_features_in_ = self.index_.dim
        return self

    def transform(self, X):
        """Embed query texts into the index space."""
        check_is_fitted(self, "index_")
        queries = check_queries(X)
        return self.embedder_.embed([q.text for q in queries])

    def predict(self, X) -> list[RankedList]:
        check_is_fitted(self, "index_")
        queries = check_queries(X)
        vectors = self.embedder_.embed([q.text for q in queries])
        return [rank_all(v, self.index_, self.depth, label=q.id) for q, v in zip(queries, vectors)]
