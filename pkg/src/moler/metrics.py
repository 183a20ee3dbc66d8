"""Recall@k and nDCG@k, per query and averaged over a run."""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from typing import Mapping

from .corpus import RelevanceJudgments, relevant_set
from .errors import NoRelevantDocuments
from .index import RankedList

GAINS = {
    "linear": lambda r: float(r),
    "exponential": lambda r: float(2 ** r - 1),
}


def _doc_ids(ranked):
    if isinstance(ranked, RankedList):
        return ranked.doc_ids
    return [d if isinstance(d, str) else d[0] for d in ranked]


def recall_at_k(ranked, relevant, k: int) -> float:
    if k < 1:
        raise ValueError("k must be positive")
    relevant = set(relevant)
    if not relevant:
        raise NoRelevantDocuments("recall is undefined without relevant documents")
    hits = len(set(_doc_ids(ranked)[:k]) & relevant)
    return hits / len(relevant)


def dcg(gains) -> float:
    return math.fsum(g / math.log2(i + 2) for i, g in enumerate(gains))


def ndcg_at_k(ranked, grades: Mapping[str, int], k: int, gain: str = "linear") -> float:
    if k < 1:
        raise ValueError("k must be positive")
    g = GAINS[gain]
    positive = sorted((r for r in grades.values() if r > 0), reverse=True)
    if not positive:
        raise NoRelevantDocuments("nDCG is undefined without positively graded documents")
    ideal = dcg(g(r) for r in positive[:k])
    actual = dcg(g(grades.get(d, 0)) for d in _doc_ids(ranked)[:k])
    return actual / ideal


@dataclass(frozen=True)
class MetricSpec:
    name: str
    k: int

    @property
    def label(self):
        return f"{self.name}@{self.k}"


_METRIC_RE = re.compile(r"^\s*(recall|ndcg)\s*@\s*(\d+)\s*(k?)\s*$", re.I)


def parse_metrics(text) -> list[MetricSpec]:
    """Parse ``"recall@1k,ndcg@10"``; a ``k`` suffix multiplies by 1000."""
    if isinstance(text, str):
        parts = [p for p in text.split(",") if p.strip()]
    else:
        parts = list(text)
    specs = []
    for part in parts:
        if isinstance(part, MetricSpec):
            specs.append(part)
            continue
        m = _METRIC_RE.match(part)
        if not m:
            raise ValueError(f"cannot parse metric {part!r}; expected e.g. recall@10 or ndcg@10")
        k = int(m.group(2)) * (1000 if m.group(3) else 1)
        if k < 1:
            raise ValueError(f"metric depth must be positive: {part!r}")
        specs.append(MetricSpec(m.group(1).lower(), k))
    if not specs:
        raise ValueError("no metrics given")
    return specs


@dataclass
class EvalReport:
    metrics: list
    per_query: dict = field(default_factory=dict)   # label -> {qid: value}
    means: dict = field(default_factory=dict)       # label -> mean or None
    skipped: dict = field(default_factory=dict)     # label -> [qid, ...]

    def to_tsv(self) -> str:
        lines = []
        for spec in self.metrics:
            label = spec.label
            for qid in sorted(self.per_query[label]):
                lines.append(f"{label}\t{qid}\t{self.per_query[label][qid]!r}")
            mean = self.means[label]
            lines.append(f"{label}\tall\t{'nan' if mean is None else repr(mean)}")
        return "\n".join(lines) + "\n"

    def to_table(self) -> str:
        rows = [("metric", "mean(%)", "queries", "skipped")]
        for spec in self.metrics:
            label = spec.label
            mean = self.means[label]
            rows.append((label, "-" if mean is None else percent(mean),
                         str(len(self.per_query[label])), str(len(self.skipped[label]))))
        widths = [max(len(r[i]) for r in rows) for i in range(4)]
        out = []
        for j, row in enumerate(rows):
            out.append("  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(row, widths))))
            if j == 0:
                out.append("  ".join("-" * w for w in widths))
        return "\n".join(out) + "\n"


def percent(value: float) -> str:
    """Render a fraction as a percentage rounded half-up to two decimals."""
    return str(Decimal(repr(value * 100)).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))


def evaluate_run(run: Mapping[str, RankedList], qrels: RelevanceJudgments, metrics="recall@1k,ndcg@10",
                 threshold: int = 1, gain: str = "linear") -> EvalReport:
    """Score every query in ``run``; queries with nothing relevant are skipped, not zeroed."""
    if not run:
        raise ValueError("run is empty")
    specs = parse_metrics(metrics)
    report = EvalReport(metrics=specs)
    for spec in specs:
        values, skipped = {}, []
        for qid in sorted(run):
            ranked = run[qid]
            try:
                if spec.name == "recall":
                    values[qid] = recall_at_k(ranked, relevant_set(qrels, qid, threshold), spec.k)
                else:
                    values[qid] = ndcg_at_k(ranked, qrels.grades(qid), spec.k, gain)
            except NoRelevantDocuments:
                skipped.append(qid)
        report.per_query[spec.label] = values
        report.skipped[spec.label] = skipped
        report.means[spec.label] = math.fsum(values.values()) / len(values) if values else None
    return report
