"""Chat-completion and embedding backends.

Live backends speak the OpenAI-compatible wire protocol (``/v1/chat/completions``
and ``/v1/embeddings``). The offline and mock backends are deterministic
stand-ins so that every pipeline path can run without network access.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import random
import re
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import requests

from .errors import BackendStatusError, EmbeddingError, EmptyCompletion, NoScript, TransportError

logger = logging.getLogger(__name__)

ENV_API_BASE = "MOLER_API_BASE"
ENV_API_KEY = "MOLER_API_KEY"
ENV_CACHE_DIR = "MOLER_CACHE_DIR"

ROLES = ("system", "user", "assistant")

# Qwen3 non-thinking evaluation decoding.
DEFAULT_TEMPERATURE = 0.7
DEFAULT_TOP_P = 0.8
DEFAULT_TOP_K = 20
DEFAULT_MAX_TOKENS = 1024

RETRY_BACKOFF_SECONDS = 1.0


@dataclass(frozen=True)
class ChatRequest:
    messages: tuple
    temperature: float = DEFAULT_TEMPERATURE
    top_p: float = DEFAULT_TOP_P
    top_k: Optional[int] = DEFAULT_TOP_K
    max_tokens: int = DEFAULT_MAX_TOKENS
    seed: Optional[int] = None
    thinking: bool = False

    def __post_init__(self):
        msgs = tuple((str(role), str(content)) for role, content in self.messages)
        if not msgs:
            raise ValueError("a chat request needs at least one message")
        for role, _ in msgs:
            if role not in ROLES:
                raise ValueError(f"unknown role {role!r}")
        object.__setattr__(self, "messages", msgs)
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if not 0 < self.top_p <= 1:
            raise ValueError("top_p must lie in (0, 1]")
        if self.top_k is not None and self.top_k < 1:
            raise ValueError("top_k must be a positive integer or None")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be positive")

    @classmethod
    def from_prompt(cls, prompt: str, **decoding) -> "ChatRequest":
        return cls(messages=(("user", prompt),), **decoding)

    def prompt_hash(self) -> str:
        return prompt_hash(self.messages)


@dataclass(frozen=True)
class ChatResponse:
    text: str
    completion_tokens: int = 0

    def __post_init__(self):
        if self.completion_tokens < 0:
            raise ValueError("completion_tokens must be >= 0")


def prompt_hash(messages) -> str:
    """Content hash identifying a conversation; keys mock scripts.

    A bare string is treated as a single user message.
    """
    if isinstance(messages, str):
        messages = (("user", messages),)
    canon = json.dumps([[r, c] for r, c in messages], ensure_ascii=False, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def _whitespace_tokens(text):
    return len(text.split())


# --------------------------------------------------------------------------- chat


class ChatBackend:
    """Minimal interface: ``chat(request) -> ChatResponse``; ``calls`` counts invocations."""

    def __init__(self):
        self._lock = threading.Lock()
        self.calls = 0

    def _count(self):
        with self._lock:
            self.calls += 1

    def chat(self, request: ChatRequest) -> ChatResponse:  # pragma: no cover - interface
        raise NotImplementedError


class HttpChatBackend(ChatBackend):
    def __init__(self, api_base=None, api_key=None, model="qwen3", timeout=120.0, session=None):
        super().__init__()
        self.api_base = (api_base or os.environ.get(ENV_API_BASE, "")).rstrip("/")
        self.api_key = api_key if api_key is not None else os.environ.get(ENV_API_KEY, "")
        if not self.api_base:
            raise ValueError(f"no API base configured; set {ENV_API_BASE}")
        self.model = model
        self.timeout = timeout
        self.session = session or requests.Session()

    def payload(self, request: ChatRequest) -> dict:
        body = {
            "model": self.model,
            "messages": [{"role": r, "content": c} for r, c in request.messages],
            "temperature": request.temperature,
            "top_p": request.top_p,
            "max_tokens": request.max_tokens,
            "seed": request.seed,
        }
        if request.top_k is not None:
            body["top_k"] = request.top_k
        if request.thinking:
            # vLLM/Qwen3 convention; opaque to everything else
            body["chat_template_kwargs"] = {"enable_thinking": True}
        return body

    def chat(self, request: ChatRequest) -> ChatResponse:
        self._count()
        data = _post_json(self.session, f"{self.api_base}/v1/chat/completions", self.payload(request),
                          self.api_key, self.timeout)
        try:
            text = data["choices"][0]["message"]["content"] or ""
        except (KeyError, IndexError, TypeError):
            raise BackendStatusError(200, f"malformed chat response: {json.dumps(data)[:200]}") from None
        if not text.strip():
            raise EmptyCompletion("backend returned an empty completion")
        usage = data.get("usage") or {}
        tokens = usage.get("completion_tokens")
        if tokens is None:
            tokens = _whitespace_tokens(text)
        return ChatResponse(text=text, completion_tokens=int(tokens))


def _post_json(session, url, body, api_key, timeout):
    headers = {"Content-Type": "application/json"}
    if api_key:
        headers["Authorization"] = f"Bearer {api_key}"
    for attempt in range(2):
        try:
            resp = session.post(url, json=body, headers=headers, timeout=timeout)
        except (requests.ConnectionError, requests.Timeout) as exc:
            if attempt == 0:
                logger.warning("transport error on %s (%s); retrying once", url, exc)
                time.sleep(RETRY_BACKOFF_SECONDS)
                continue
            raise TransportError(str(exc)) from exc
        if resp.status_code // 100 != 2:
            raise BackendStatusError(resp.status_code, resp.text)
        try:
            return resp.json()
        except ValueError:
            raise BackendStatusError(resp.status_code, "response body is not JSON") from None
    raise AssertionError("unreachable")


class MockChatBackend(ChatBackend):
    """Replays scripted responses keyed by :func:`prompt_hash`.

    A script value may be a string or a list of strings; with a list, the
    i-th call for that prompt returns item ``min(i, len - 1)``. An empty
    response raises :class:`EmptyCompletion`, like a live backend would.
    Responses are never cached: every call increments ``calls``.
    """

    def __init__(self, script=None):
        super().__init__()
        self.script = {}
        self._seen = {}
        for key, value in (script or {}).items():
            self.add(key, value, hashed=True)

    def add(self, prompt_or_hash, response, hashed=False):
        key = prompt_or_hash if hashed else prompt_hash(prompt_or_hash)
        self.script[key] = [response] if isinstance(response, str) else list(response)
        return key

    @classmethod
    def from_file(cls, path):
        """Load a JSONL script: ``{"prompt": ..., "response": ...}`` or ``{"hash": ..., "response": ...}``."""
        mock = cls()
        with Path(path).open("r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                rec = json.loads(line)
                if "hash" in rec:
                    mock.add(rec["hash"], rec["response"], hashed=True)
                elif "prompt" in rec:
                    mock.add(rec["prompt"], rec["response"])
                else:
                    raise ValueError(f"{path}:{lineno}: script record needs 'prompt' or 'hash'")
        return mock

    def chat(self, request: ChatRequest) -> ChatResponse:
        self._count()
        key = request.prompt_hash()
        with self._lock:
            if key not in self.script:
                raise NoScript(key)
            i = self._seen.get(key, 0)
            self._seen[key] = i + 1
            responses = self.script[key]
            text = responses[min(i, len(responses) - 1)]
        if not text.strip():
            raise EmptyCompletion("scripted empty completion")
        return ChatResponse(text=text, completion_tokens=_whitespace_tokens(text))


_ORIGINAL_RE = re.compile(r"^Original question:\s*(.+)$", re.M)
_COUNT_RE = re.compile(r"exactly\s+(\d+)\s+different", re.I)
_QUESTION_RE = re.compile(r"^Question\s+\d+:\s*(.+)$", re.M)
_QUERY_RE = re.compile(r"^Query:\s*(.+)$", re.M)


class OfflineChatBackend(ChatBackend):
    """Deterministic, network-free responder for the package's own prompt templates.

    Expansion prompts get ``cnt`` numbered reshufflings of the query's words;
    passage prompts get a ``Passage:`` that restates every question. Output
    depends only on (seed, prompt), so concurrent use is reproducible.
    """

    def __init__(self, seed=0):
        super().__init__()
        self.seed = seed

    def _rng(self, request):
        digest = hashlib.sha256(f"{self.seed}:{request.prompt_hash()}".encode()).digest()
        return random.Random(int.from_bytes(digest[:8], "little"))

    def chat(self, request: ChatRequest) -> ChatResponse:
        self._count()
        prompt = request.messages[-1][1]
        rng = self._rng(request)
        original = _ORIGINAL_RE.search(prompt)
        count = _COUNT_RE.search(prompt)
        if original and count:
            words = original.group(1).split()
            lines = []
            for i in range(1, int(count.group(1)) + 1):
                variant = list(words)
                rng.shuffle(variant)
                if len(variant) > 2:
                    variant.pop(rng.randrange(len(variant)))
                lines.append(f"{i}. {' '.join(variant)}")
            text = "\n".join(lines)
        else:
            questions = _QUESTION_RE.findall(prompt) or _QUERY_RE.findall(prompt)
            if not questions:
                questions = [prompt.strip().splitlines()[-1]]
            text = "Passage: " + " ".join(q.strip() for q in questions)
        return ChatResponse(text=text, completion_tokens=_whitespace_tokens(text))


class RecordingChatBackend(ChatBackend):
    """Wraps a backend and records every successful exchange as a replayable mock script."""

    def __init__(self, inner: ChatBackend):
        super().__init__()
        self.inner = inner
        self.records = []

    def chat(self, request: ChatRequest) -> ChatResponse:
        self._count()
        resp = self.inner.chat(request)
        with self._lock:
            self.records.append({"hash": request.prompt_hash(), "response": resp.text})
        return resp

    def dump(self, path):
        with Path(path).open("w", encoding="utf-8") as fh:
            for rec in self.records:
                fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


# ----------------------------------------------------------------------- embeddings

_TOKEN_RE = re.compile(r"[^\W_]+")


def tokenize(text: str) -> list[str]:
    """Lowercased alphanumeric runs."""
    return _TOKEN_RE.findall(text.lower())


def _bucket(token: str, dim: int) -> int:
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") % dim


def offline_embed(text: str, dim: int = 256) -> np.ndarray:
    """Hashed bag-of-words vector, L2-normalised; token-free text maps to ``e_0``."""
    if dim < 8:
        raise ValueError("dim must be >= 8")
    vec = np.zeros(dim, dtype=np.float64)
    for tok in tokenize(text):
        vec[_bucket(tok, dim)] += 1.0
    norm = np.linalg.norm(vec)
    if norm == 0.0:
        vec[0] = 1.0
        return vec
    return vec / norm


class Embedder:
    """Interface: ``embed(texts) -> ndarray (len(texts), dim)``.

    ``calls`` counts backend invocations and ``texts_embedded`` the number of
    texts actually sent to the backend.
    """

    identifier = "embedder"

    def __init__(self):
        self._lock = threading.Lock()
        self.calls = 0
        self.texts_embedded = 0

    def _count(self, n):
        with self._lock:
            self.calls += 1
            self.texts_embedded += n

    def embed(self, texts: Sequence[str]) -> np.ndarray:  # pragma: no cover - interface
        raise NotImplementedError


class OfflineEmbedder(Embedder):
    def __init__(self, dim=256):
        super().__init__()
        if dim < 8:
            raise ValueError("dim must be >= 8")
        self.dim = dim
        self.identifier = f"offline-bow-{dim}"

    def embed(self, texts):
        texts = _check_texts(texts)
        self._count(len(texts))
        return np.stack([offline_embed(t, self.dim) for t in texts])


class HttpEmbedder(Embedder):
    def __init__(self, api_base=None, api_key=None, model="text-embedding-ada-002", batch_size=64,
                 timeout=120.0, session=None):
        super().__init__()
        self.api_base = (api_base or os.environ.get(ENV_API_BASE, "")).rstrip("/")
        self.api_key = api_key if api_key is not None else os.environ.get(ENV_API_KEY, "")
        if not self.api_base:
            raise ValueError(f"no API base configured; set {ENV_API_BASE}")
        self.model = model
        self.batch_size = batch_size
        self.timeout = timeout
        self.session = session or requests.Session()
        self.identifier = f"http-{model}"

    def embed(self, texts):
        texts = _check_texts(texts)
        rows = []
        for start in range(0, len(texts), self.batch_size):
            batch = texts[start:start + self.batch_size]
            self._count(len(batch))
            data = _post_json(self.session, f"{self.api_base}/v1/embeddings",
                              {"model": self.model, "input": batch}, self.api_key, self.timeout)
            try:
                items = sorted(data["data"], key=lambda d: d.get("index", 0))
                vectors = [item["embedding"] for item in items]
            except (KeyError, TypeError):
                raise EmbeddingError("malformed embeddings response") from None
            if len(vectors) != len(batch):
                raise EmbeddingError(f"asked for {len(batch)} embeddings, got {len(vectors)}")
            rows.extend(vectors)
        return _as_matrix(rows)


def _check_texts(texts):
    if isinstance(texts, str):
        raise TypeError("embed() takes a sequence of strings, not a single string")
    texts = list(texts)
    for t in texts:
        if not isinstance(t, str) or not t:
            raise ValueError("texts must be non-empty strings")
    return texts


def _as_matrix(rows):
    dims = {len(r) for r in rows}
    if len(dims) > 1:
        raise EmbeddingError(f"dimension mismatch within batch: {sorted(dims)}")
    mat = np.asarray(rows, dtype=np.float64)
    if mat.ndim != 2 or mat.shape[1] == 0:
        raise EmbeddingError("empty embedding vectors")
    if not np.all(np.isfinite(mat)):
        raise EmbeddingError("non-finite embedding values")
    return mat


class CachedEmbedder(Embedder):
    """Content-addressed embedding cache in front of another embedder.

    Keys are ``sha256(identifier + NUL + text)``. With ``cache_dir`` set the
    cache is also persisted as one ``.npy`` file per key, sharded by prefix.
    """

    def __init__(self, inner: Embedder, cache_dir=None):
        super().__init__()
        self.inner = inner
        self.identifier = inner.identifier
        self.cache_dir = Path(cache_dir) if cache_dir else None
        self._memory: dict[str, np.ndarray] = {}
        self.hits = 0

    def key(self, text):
        return hashlib.sha256(f"{self.identifier}\0{text}".encode("utf-8")).hexdigest()

    def _path(self, key):
        return self.cache_dir / key[:2] / f"{key}.npy"

    def _lookup(self, key):
        vec = self._memory.get(key)
        if vec is None and self.cache_dir is not None:
            p = self._path(key)
            if p.is_file():
                vec = np.load(p)
                self._memory[key] = vec
        return vec

    def _store(self, key, vec):
        self._memory[key] = vec
        if self.cache_dir is not None:
            p = self._path(key)
            p.parent.mkdir(parents=True, exist_ok=True)
            tmp = p.with_suffix(f".{threading.get_ident()}.tmp")
            with tmp.open("wb") as fh:
                np.save(fh, vec)
            os.replace(tmp, p)

    def embed(self, texts):
        texts = _check_texts(texts)
        keys = [self.key(t) for t in texts]
        with self._lock:
            found = {k: self._lookup(k) for k in set(keys)}
        missing = {}
        for t, k in zip(texts, keys):
            if found[k] is None:
                missing.setdefault(k, t)
        with self._lock:
            self.hits += len(texts) - sum(1 for k in keys if k in missing)
        if missing:
            self._count(len(missing))
            vectors = self.inner.embed(list(missing.values()))
            with self._lock:
                for k, vec in zip(missing, vectors):
                    self._store(k, np.array(vec, dtype=np.float64))
                    found[k] = self._memory[k]
        return _as_matrix([found[k] for k in keys])
