"""Input validation helpers for the estimator front-ends."""

from __future__ import annotations

from collections.abc import Iterable, Mapping

from .corpus import Document, Query


def check_documents(X) -> list:
    """Accept Documents, ``{"_id", "title", "text"}`` dicts or ``(id, text)`` pairs."""
    if isinstance(X, (str, bytes)) or not isinstance(X, Iterable):
        raise TypeError("expected an iterable of documents")
    docs = []
    for item in X:
        if isinstance(item, Document):
            docs.append(item)
        elif isinstance(item, Mapping):
            docs.append(Document(str(item["_id"]), item.get("title") or "", item["text"]))
        elif isinstance(item, tuple) and len(item) == 2:
            docs.append(Document(str(item[0]), "", item[1]))
        elif isinstance(item, tuple) and len(item) == 3:
            docs.append(Document(str(item[0]), item[1], item[2]))
        else:
            raise TypeError(f"cannot interpret {type(item).__name__} as a document")
    if not docs:
        raise ValueError("at least one document is required")
    ids = [d.id for d in docs]
    if len(set(ids)) != len(ids):
        raise ValueError("document ids must be unique")
    return docs


def check_queries(X) -> list:
    """Accept Queries, ``(id, text)`` pairs, dicts, or bare strings (ids become ``q0``, ``q1``, ...)."""
    if isinstance(X, (str, Query)):
        X = [X]
    if isinstance(X, Mapping):
        X = list(X.items())
    queries = []
    for i, item in enumerate(X):
        if isinstance(item, Query):
            queries.append(item)
        elif isinstance(item, str):
            queries.append(Query(f"q{i}", item))
        elif isinstance(item, Mapping):
            queries.append(Query(str(item["_id"]), item["text"]))
        elif isinstance(item, tuple) and len(item) == 2:
            queries.append(Query(str(item[0]), item[1]))
        else:
            raise TypeError(f"cannot interpret {type(item).__name__} as a query")
    ids = [q.id for q in queries]
    if len(set(ids)) != len(ids):
        raise ValueError("query ids must be unique")
    return queries


def check_positive_int(value, name, allow_none=False):
    if value is None and allow_none:
        return None
    if isinstance(value, bool) or not isinstance(value, int) or value < 1:
        raise ValueError(f"{name} must be a positive integer, got {value!r}")
    return value
