"""Reciprocal rank fusion."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

from .index import RankedList

RRF_K = 60.0


@dataclass(frozen=True)
class FusionConfig:
    k: float = RRF_K

    def __post_init__(self):
        if not self.k > 0:
            raise ValueError("RRF constant must be > 0")


def rrf_fuse(lists: Sequence[RankedList], cfg: Optional[FusionConfig] = None,
             label: Optional[str] = None, depth: Optional[int] = None) -> RankedList:
    """Fuse ranked lists: ``score(d) = sum_k 1 / (rank_k(d) + K)`` with 1-based ranks.

    A document absent from a list gets no term from it. Contributions are
    summed with :func:`math.fsum`, so the result does not depend on list order.
    """
    cfg = cfg or FusionConfig()
    if not lists:
        raise ValueError("rrf_fuse needs at least one ranked list")
    terms: dict[str, list[float]] = {}
    for ranked in lists:
        for rank, (doc_id, _) in enumerate(ranked.entries, start=1):
            terms.setdefault(doc_id, []).append(1.0 / (rank + cfg.k))
    scores = {d: math.fsum(t) for d, t in terms.items()}
    if label is None:
        label = lists[0].probe_label
    return RankedList.from_scores(label, scores, depth)
