"""BEIR-format corpus, query and qrels ingestion.

Layout of a dataset directory::

    corpus.jsonl        {"_id": ..., "title": ..., "text": ...}
    queries.jsonl       {"_id": ..., "text": ...}
    qrels/<split>.tsv   query-id<TAB>corpus-id<TAB>score  (with header row)
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import Mapping

from .errors import CorpusFormatError, DuplicateIdError

QRELS_HEADER = ("query-id", "corpus-id", "score")
TITLE_SEPARATOR = "\n"


@dataclass(frozen=True)
class Document:
    id: str
    title: str
    text: str

    def __post_init__(self):
        if not self.text:
            raise ValueError(f"document {self.id!r} has empty text")

    @property
    def retrieval_text(self) -> str:
        return self.title + TITLE_SEPARATOR + self.text


@dataclass(frozen=True)
class Query:
    id: str
    text: str

    def __post_init__(self):
        if not self.text:
            raise ValueError(f"query {self.id!r} has empty text")


@dataclass(frozen=True)
class RelevanceJudgments:
    """Graded judgments, ``judgments[qid][docid] -> grade``."""

    judgments: Mapping[str, Mapping[str, int]] = field(default_factory=dict)

    def __post_init__(self):
        frozen = {}
        for qid, docs in self.judgments.items():
            for did, grade in docs.items():
                if not isinstance(grade, int) or grade < 0:
                    raise ValueError(f"grade for ({qid}, {did}) must be a non-negative int, got {grade!r}")
            frozen[qid] = MappingProxyType(dict(docs))
        object.__setattr__(self, "judgments", MappingProxyType(frozen))

    def __contains__(self, qid):
        return qid in self.judgments

    def __len__(self):
        return len(self.judgments)

    def grades(self, qid) -> Mapping[str, int]:
        return self.judgments.get(qid, MappingProxyType({}))


@dataclass(frozen=True)
class Dataset:
    corpus: tuple
    queries: tuple
    qrels: RelevanceJudgments
    split: str = "test"


def relevant_set(judgments: RelevanceJudgments, qid: str, threshold: int = 1) -> set:
    """Document ids judged at or above ``threshold`` for ``qid``; empty when unjudged."""
    if threshold < 1:
        raise ValueError("threshold must be >= 1")
    return {did for did, grade in judgments.grades(qid).items() if grade >= threshold}


def _iter_jsonl(path):
    path = Path(path)
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusFormatError(f"invalid JSON ({exc.msg})", path, lineno) from None
            if not isinstance(record, dict):
                raise CorpusFormatError("record is not a JSON object", path, lineno)
            yield lineno, record


def _field(record, name, path, lineno, allow_empty=False):
    if name not in record:
        raise CorpusFormatError(f"missing field {name!r}", path, lineno)
    value = record[name]
    if isinstance(value, (int, float)) and not isinstance(value, bool) and name == "_id":
        value = str(value)
    if not isinstance(value, str):
        raise CorpusFormatError(f"field {name!r} must be a string", path, lineno)
    if not allow_empty and not value:
        raise CorpusFormatError(f"field {name!r} is empty", path, lineno)
    return value


def load_corpus(path) -> list[Document]:
    docs = []
    seen = {}
    for lineno, record in _iter_jsonl(path):
        doc_id = _field(record, "_id", path, lineno)
        if doc_id in seen:
            raise DuplicateIdError(f"duplicate _id {doc_id!r} (first seen on line {seen[doc_id]})", path, lineno)
        seen[doc_id] = lineno
        title = record.get("title", "")
        if title is None:
            title = ""
        if not isinstance(title, str):
            raise CorpusFormatError("field 'title' must be a string", path, lineno)
        text = _field(record, "text", path, lineno)
        docs.append(Document(doc_id, title, text))
    return docs


def load_queries(path) -> list[Query]:
    queries = []
    seen = {}
    for lineno, record in _iter_jsonl(path):
        qid = _field(record, "_id", path, lineno)
        if qid in seen:
            raise DuplicateIdError(f"duplicate _id {qid!r} (first seen on line {seen[qid]})", path, lineno)
        seen[qid] = lineno
        queries.append(Query(qid, _field(record, "text", path, lineno)))
    return queries


def load_qrels(path) -> RelevanceJudgments:
    """Read a qrels TSV. Later rows for the same (query, doc) pair overwrite earlier ones."""
    path = Path(path)
    judgments: dict[str, dict[str, int]] = {}
    with path.open("r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh, delimiter="\t")
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != QRELS_HEADER:
            raise CorpusFormatError("missing header row 'query-id\\tcorpus-id\\tscore'", path, 1)
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != 3:
                raise CorpusFormatError(f"expected 3 columns, got {len(row)}", path, lineno)
            qid, did, raw = (cell.strip() for cell in row)
            try:
                grade = int(raw)
            except ValueError:
                raise CorpusFormatError(f"score {raw!r} is not an integer", path, lineno) from None
            if grade < 0:
                raise CorpusFormatError(f"negative score {grade}", path, lineno)
            judgments.setdefault(qid, {})[did] = grade
    return RelevanceJudgments(judgments)


def save_corpus(docs, path):
    with Path(path).open("w", encoding="utf-8") as fh:
        for d in docs:
            fh.write(json.dumps({"_id": d.id, "title": d.title, "text": d.text}, ensure_ascii=False) + "\n")


def save_queries(queries, path):
    with Path(path).open("w", encoding="utf-8") as fh:
        for q in queries:
            fh.write(json.dumps({"_id": q.id, "text": q.text}, ensure_ascii=False) + "\n")


def save_qrels(judgments: RelevanceJudgments, path):
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        writer.writerow(QRELS_HEADER)
        for qid, docs in judgments.judgments.items():
            for did, grade in docs.items():
                writer.writerow((qid, did, grade))


def dataset_paths(root, split="test"):
    root = Path(root)
    return {
        "corpus": root / "corpus.jsonl",
        "queries": root / "queries.jsonl",
        "qrels": root / "qrels" / f"{split}.tsv",
    }


def load_beir(root, split="test") -> Dataset:
    """Load a BEIR directory. Missing files raise ``FileNotFoundError``."""
    paths = dataset_paths(root, split)
    for name, p in paths.items():
        if not p.is_file():
            raise FileNotFoundError(f"{name} file not found: {p}")
    return Dataset(
        corpus=tuple(load_corpus(paths["corpus"])),
        queries=tuple(load_queries(paths["queries"])),
        qrels=load_qrels(paths["qrels"]),
        split=split,
    )


def save_beir(dataset: Dataset, root):
    paths = dataset_paths(root, dataset.split)
    paths["qrels"].parent.mkdir(parents=True, exist_ok=True)
    save_corpus(dataset.corpus, paths["corpus"])
    save_queries(dataset.queries, paths["queries"])
    save_qrels(dataset.qrels, paths["qrels"])
    return paths
