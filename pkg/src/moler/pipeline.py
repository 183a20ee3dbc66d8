"""Query augmentation strategies: Raw, Q2D, CoT, LC-MQR, MSLF and MMLF.

Every strategy returns a fused :class:`RankedList` plus a :class:`RunTrace`.
Model calls per query: raw 0, q2d 1, cot 1, lc_mqr 1, mslf 2, mmlf n+1.
Chat failures are retried once per stage; a stage that still fails degrades
the query to a weaker strategy and the trace records why.
"""

from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_documents, check_positive_int, check_queries
from .backends import (
    DEFAULT_MAX_TOKENS,
    DEFAULT_TEMPERATURE,
    DEFAULT_TOP_K,
    DEFAULT_TOP_P,
    CachedEmbedder,
    ChatRequest,
    OfflineChatBackend,
    OfflineEmbedder,
)
from .corpus import Query, RelevanceJudgments
from .errors import BadExpansionCount, ChatError, EmptyPassage
from .fusion import FusionConfig, rrf_fuse
from .index import CorpusIndex, RankedList, build_index, rank_all
from .metrics import evaluate_run, parse_metrics
from .prompts import (
    DEFAULT_EXPANSIONS,
    parse_cqe_response,
    parse_mqr_response,
    render_cot,
    render_cqe,
    render_mqr,
    render_q2d,
)

logger = logging.getLogger(__name__)

STRATEGIES = ("raw", "q2d", "cot", "lc_mqr", "mslf", "mmlf")


@dataclass(frozen=True)
class StrategyConfig:
    strategy: str = "mmlf"
    n: int = DEFAULT_EXPANSIONS
    fusion: FusionConfig = field(default_factory=FusionConfig)
    pool_depth: Optional[int] = None
    temperature: float = DEFAULT_TEMPERATURE
    top_p: float = DEFAULT_TOP_P
    top_k: Optional[int] = DEFAULT_TOP_K
    max_tokens: int = DEFAULT_MAX_TOKENS
    seed: Optional[int] = None
    thinking: bool = False
    templates: object = None
    trace_depth: int = 10

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; choose from {', '.join(STRATEGIES)}")
        check_positive_int(self.n, "n")
        check_positive_int(self.pool_depth, "pool_depth", allow_none=True)

    def request(self, prompt: str) -> ChatRequest:
        return ChatRequest.from_prompt(
            prompt, temperature=self.temperature, top_p=self.top_p, top_k=self.top_k,
            max_tokens=self.max_tokens, seed=self.seed, thinking=self.thinking,
        )


@dataclass
class RunTrace:
    query_id: str
    strategy: str
    sub_queries: list = field(default_factory=list)
    passages: list = field(default_factory=list)
    chat_calls: int = 0
    completion_tokens_total: int = 0
    lists: dict = field(default_factory=dict)
    fallbacks: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), ensure_ascii=False, sort_keys=True)


@dataclass(frozen=True)
class SearchContext:
    """An index plus the embedder that produced it."""

    index: CorpusIndex
    embedder: object

    def search(self, text: str, depth=None, label="") -> RankedList:
        vec = self.embedder.embed([text])[0]
        return rank_all(vec, self.index, depth, label=label)


class _StageFailed(Exception):
    def __init__(self, cause):
        self.cause = cause
        super().__init__(str(cause))


def _ask(chat, cfg, prompt, parse, trace):
    last = None
    for _ in range(2):
        trace.chat_calls += 1
        try:
            resp = chat.chat(cfg.request(prompt))
        except ChatError as exc:
            last = exc
            continue
        trace.completion_tokens_total += resp.completion_tokens
        try:
            return parse(resp.text)
        except (BadExpansionCount, EmptyPassage) as exc:
            last = exc
    raise _StageFailed(last)


def _expand(query: Query, chat, cfg, trace):
    """Sub-queries, padded with the original query after repeated short answers; None on chat failure."""
    try:
        subs = _ask(chat, cfg, render_mqr(query.text, cfg.n, cfg.templates),
                    lambda text: parse_mqr_response(text, cfg.n), trace)
    except _StageFailed as failed:
        if isinstance(failed.cause, BadExpansionCount):
            subs = failed.cause.found + [query.text] * (cfg.n - len(failed.cause.found))
            trace.fallbacks.append(f"mqr_padded:{len(failed.cause.found)}/{cfg.n}")
        else:
            trace.fallbacks.append(f"mqr_failed:{type(failed.cause).__name__}")
            return None
    trace.sub_queries = list(subs)
    return subs


def _record(trace, ranked, cfg):
    trace.lists[ranked.probe_label] = ranked.doc_ids[:cfg.trace_depth]
    return ranked


def _fuse(query, lists, cfg):
    return rrf_fuse(lists, cfg.fusion, label=query.id, depth=cfg.pool_depth)


def _raw(query, ctx, cfg, trace):
    return _record(trace, ctx.search(query.text, cfg.pool_depth, "query"), cfg)


def run_raw(query: Query, ctx: SearchContext, cfg: Optional[StrategyConfig] = None, chat=None):
    cfg = cfg or StrategyConfig(strategy="raw")
    trace = RunTrace(query.id, "raw")
    ranked = _raw(query, ctx, cfg, trace)
    return RankedList(query.id, ranked.entries), trace


def _single_passage(query, ctx, chat, cfg, render, name):
    trace = RunTrace(query.id, name)
    try:
        passage = _ask(chat, cfg, render(query.text, cfg.templates), parse_cqe_response, trace)
    except _StageFailed as failed:
        trace.fallbacks.append(f"{name}_failed_raw:{type(failed.cause).__name__}")
        ranked = _raw(query, ctx, cfg, trace)
        return RankedList(query.id, ranked.entries), trace
    trace.passages = [passage]
    ranked = _record(trace, ctx.search(query.text + "\n" + passage, cfg.pool_depth, "query+passage"), cfg)
    return RankedList(query.id, ranked.entries), trace


def run_q2d(query: Query, ctx: SearchContext, chat, cfg: Optional[StrategyConfig] = None):
    return _single_passage(query, ctx, chat, cfg or StrategyConfig(strategy="q2d"), render_q2d, "q2d")


def run_cot(query: Query, ctx: SearchContext, chat, cfg: Optional[StrategyConfig] = None):
    return _single_passage(query, ctx, chat, cfg or StrategyConfig(strategy="cot"), render_cot, "cot")


def _sub_query_lists(ctx, subs, cfg, trace):
    return [_record(trace, ctx.search(s, cfg.pool_depth, f"sub_{i}"), cfg) for i, s in enumerate(subs, 1)]


def run_lc_mqr(query: Query, ctx: SearchContext, chat, cfg: Optional[StrategyConfig] = None):
    cfg = cfg or StrategyConfig(strategy="lc_mqr")
    trace = RunTrace(query.id, "lc_mqr")
    lists = [_raw(query, ctx, cfg, trace)]
    subs = _expand(query, chat, cfg, trace)
    if subs is not None:
        lists += _sub_query_lists(ctx, subs, cfg, trace)
    return _fuse(query, lists, cfg), trace


def run_mslf(query: Query, ctx: SearchContext, chat, cfg: Optional[StrategyConfig] = None):
    cfg = cfg or StrategyConfig(strategy="mslf")
    trace = RunTrace(query.id, "mslf")
    lists = [_raw(query, ctx, cfg, trace)]
    subs = _expand(query, chat, cfg, trace)
    if subs is None:
        return _fuse(query, lists, cfg), trace
    try:
        passage = _ask(chat, cfg, render_cqe(query.text, subs, cfg.templates), parse_cqe_response, trace)
    except _StageFailed as failed:
        trace.fallbacks.append(f"cqe_failed_lc_mqr:{type(failed.cause).__name__}")
        lists += _sub_query_lists(ctx, subs, cfg, trace)
        return _fuse(query, lists, cfg), trace
    trace.passages = [passage]
    lists.append(_record(trace, ctx.search(passage, cfg.pool_depth, "passage"), cfg))
    return _fuse(query, lists, cfg), trace


def run_mmlf(query: Query, ctx: SearchContext, chat, cfg: Optional[StrategyConfig] = None):
    cfg = cfg or StrategyConfig(strategy="mmlf")
    trace = RunTrace(query.id, "mmlf")
    lists = [_raw(query, ctx, cfg, trace)]
    subs = _expand(query, chat, cfg, trace)
    if subs is None:
        return _fuse(query, lists, cfg), trace
    for i, sub in enumerate(subs, start=1):
        try:
            passage = _ask(chat, cfg, render_cqe(sub, (), cfg.templates), parse_cqe_response, trace)
        except _StageFailed as failed:
            trace.fallbacks.append(f"cqe_{i}_dropped:{type(failed.cause).__name__}")
            continue
        trace.passages.append(passage)
        lists.append(_record(trace, ctx.search(passage, cfg.pool_depth, f"passage_{i}"), cfg))
    return _fuse(query, lists, cfg), trace


_RUNNERS = {
    "raw": lambda q, ctx, chat, cfg: run_raw(q, ctx, cfg),
    "q2d": run_q2d,
    "cot": run_cot,
    "lc_mqr": run_lc_mqr,
    "mslf": run_mslf,
    "mmlf": run_mmlf,
}


def run_strategy(query: Query, ctx: SearchContext, chat, cfg: StrategyConfig):
    return _RUNNERS[cfg.strategy](query, ctx, chat, cfg)


def run_queries(queries: Sequence[Query], ctx: SearchContext, chat, cfg: StrategyConfig, parallel: int = 1):
    """Run one strategy over many queries; returns ``({qid: RankedList}, [RunTrace, ...])`` in input order."""
    check_positive_int(parallel, "parallel")
    if parallel == 1:
        results = [run_strategy(q, ctx, chat, cfg) for q in queries]
    else:
        with ThreadPoolExecutor(max_workers=parallel) as pool:
            results = list(pool.map(lambda q: run_strategy(q, ctx, chat, cfg), queries))
    run = {q.id: ranked for q, (ranked, _) in zip(queries, results)}
    return run, [trace for _, trace in results]


def sweep_expansions(queries, ctx: SearchContext, chat, strategy: str, n_values, qrels: RelevanceJudgments,
                     metrics="recall@10", base: Optional[StrategyConfig] = None, parallel: int = 1) -> list[dict]:
    """Mean metric values for each expansion count (plot data)."""
    base = base or StrategyConfig()
    specs = parse_metrics(metrics)
    rows = []
    for n in n_values:
        cfg = replace(base, strategy=strategy, n=n)
        run, traces = run_queries(queries, ctx, chat, cfg, parallel)
        report = evaluate_run(run, qrels, specs)
        row = {"strategy": strategy, "n": n, "chat_calls": sum(t.chat_calls for t in traces)}
        for spec in specs:
            row[spec.label] = report.means[spec.label]
            row[f"{spec.label}_skipped"] = len(report.skipped[spec.label])
        rows.append(row)
    return rows


def _cell(value):
    if value is None:
        return ""
    return repr(value) if isinstance(value, float) else value


def write_sweep_csv(rows, path):
    fields = list(dict.fromkeys(key for row in rows for key in row)) or ["strategy", "n"]
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _cell(row.get(k)) for k in fields})


# -- TREC run files ------------------------------------------------------------

def format_run(run: dict, tag: str) -> str:
    lines = []
    for qid, ranked in run.items():
        for rank, (doc_id, score) in enumerate(ranked.entries, start=1):
            lines.append(f"{qid} Q0 {doc_id} {rank} {score!r} {tag}")
    return "".join(line + "\n" for line in lines)


def write_run(run: dict, path, tag: str):
    Path(path).write_text(format_run(run, tag), encoding="utf-8")


def read_run(path) -> dict:
    """Parse a TREC run file into ``{qid: RankedList}`` ordered by the file's ranks."""
    rows: dict[str, list] = {}
    with Path(path).open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 6:
                raise ValueError(f"{path}:{lineno}: expected 6 columns, got {len(parts)}")
            qid, _, doc_id, rank, score, _ = parts
            rows.setdefault(qid, []).append((int(rank), doc_id, float(score)))
    run = {}
    for qid, items in rows.items():
        items.sort()
        scores = {doc_id: score for _, doc_id, score in items}
        run[qid] = RankedList.from_scores(qid, scores)
    return run


def write_traces(traces, path):
    with Path(path).open("w", encoding="utf-8") as fh:
        for trace in traces:
            fh.write(trace.to_json() + "\n")


# -- estimator front-end ---------------------------------------------------------

class QueryExpansionRetriever(BaseEstimator):
    """LLM-augmented dense retriever with reciprocal-rank late fusion.

    ``fit`` embeds the corpus; ``predict`` runs the configured strategy for
    every query and returns ``{query_id: RankedList}``. Per-query traces of
    the last ``predict`` call are kept in ``traces_``.

    With no ``chat``/``embedder`` given, the deterministic offline backends
    are used.
    """

    def __init__(self, strategy="mmlf", n_expansions=DEFAULT_EXPANSIONS, rrf_k=60.0, pool_depth=None,
                 chat=None, embedder=None, temperature=DEFAULT_TEMPERATURE, top_p=DEFAULT_TOP_P,
                 top_k=DEFAULT_TOP_K, max_tokens=DEFAULT_MAX_TOKENS, seed=None, thinking=False,
                 templates=None, n_jobs=1):
        self.strategy = strategy
        self.n_expansions = n_expansions
        self.rrf_k = rrf_k
        self.pool_depth = pool_depth
        self.chat = chat
        self.embedder = embedder
        self.temperature = temperature
        self.top_p = top_p
        self.top_k = top_k
        self.max_tokens = max_tokens
        self.seed = seed
        self.thinking = thinking
        self.templates = templates
        self.n_jobs = n_jobs

    def config(self) -> StrategyConfig:
        return StrategyConfig(
            strategy=self.strategy, n=self.n_expansions, fusion=FusionConfig(self.rrf_k),
            pool_depth=self.pool_depth, temperature=self.temperature, top_p=self.top_p, top_k=self.top_k,
            max_tokens=self.max_tokens, seed=self.seed, thinking=self.thinking, templates=self.templates,
        )

    def fit(self, X, y=None, index: Optional[CorpusIndex] = None):
        """Embed documents ``X``; pass a prebuilt ``index`` to skip embedding (``X`` may then be None)."""
        self.config()
        self.embedder_ = self.embedder if self.embedder is not None else CachedEmbedder(OfflineEmbedder())
        self.chat_ = self.chat if self.chat is not None else OfflineChatBackend(seed=self.seed or 0)
        self.index_ = index if index is not None else build_index(check_documents(X), self.embedder_)
        self.n_features_in_ = self.index_.dim
        return self

    def predict(self, X) -> dict:
        check_is_fitted(self, "index_")
        ctx = SearchContext(self.index_, self.embedder_)
        run, self.traces_ = run_queries(check_queries(X), ctx, self.chat_, self.config(), self.n_jobs)
        return run

    def score(self, X, y: RelevanceJudgments, metric="recall@10") -> float:
        """Mean of ``metric`` over judged queries."""
        spec = parse_metrics(metric)[0]
        report = evaluate_run(self.predict(X), y, [spec])
        mean = report.means[spec.label]
        return float("nan") if mean is None else mean
