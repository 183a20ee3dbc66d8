import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import pytest

from moler.backends import (
    CachedEmbedder,
    ChatRequest,
    HttpChatBackend,
    HttpEmbedder,
    MockChatBackend,
    OfflineChatBackend,
    OfflineEmbedder,
    RecordingChatBackend,
    offline_embed,
    prompt_hash,
)
from moler.errors import BackendStatusError, EmbeddingError, EmptyCompletion, NoScript, TransportError
from moler.prompts import parse_cqe_response, parse_mqr_response, render_cqe, render_mqr


def test_chat_request_defaults_and_validation():
    req = ChatRequest.from_prompt("hi")
    assert (req.temperature, req.top_p, req.top_k) == (0.7, 0.8, 20)
    with pytest.raises(ValueError):
        ChatRequest(messages=())
    with pytest.raises(ValueError):
        ChatRequest.from_prompt("x", top_p=0.0)
    with pytest.raises(ValueError):
        ChatRequest.from_prompt("x", temperature=-1)
    with pytest.raises(ValueError):
        ChatRequest(messages=(("robot", "x"),))


def test_mock_returns_script_and_counts():
    mock = MockChatBackend()
    mock.add("expand this", "1. a\n2. b\n3. c")
    assert mock.calls == 0
    resp = mock.chat(ChatRequest.from_prompt("expand this"))
    assert resp.text == "1. a\n2. b\n3. c"
    assert mock.calls == 1


def test_mock_unscripted_prompt():
    with pytest.raises(NoScript):
        MockChatBackend().chat(ChatRequest.from_prompt("unknown"))


def test_mock_does_not_cache():
    mock = MockChatBackend()
    mock.add("p", "x")
    mock.chat(ChatRequest.from_prompt("p"))
    mock.chat(ChatRequest.from_prompt("p"))
    assert mock.calls == 2


def test_mock_sequence_and_empty_completion():
    mock = MockChatBackend()
    mock.add("p", ["", "second"])
    with pytest.raises(EmptyCompletion):
        mock.chat(ChatRequest.from_prompt("p"))
    assert mock.chat(ChatRequest.from_prompt("p")).text == "second"
    assert mock.chat(ChatRequest.from_prompt("p")).text == "second"


def test_mock_script_file(tmp_path):
    path = tmp_path / "script.jsonl"
    path.write_text(json.dumps({"prompt": "a", "response": "A"}) + "\n"
                    + json.dumps({"hash": prompt_hash("b"), "response": "B"}) + "\n")
    mock = MockChatBackend.from_file(path)
    assert mock.chat(ChatRequest.from_prompt("a")).text == "A"
    assert mock.chat(ChatRequest.from_prompt("b")).text == "B"


def test_recording_replays_byte_for_byte(tmp_path):
    rec = RecordingChatBackend(OfflineChatBackend(seed=3))
    prompts = [render_mqr("zinc immune response", 3), render_cqe("zinc", ["immune"])]
    originals = [rec.chat(ChatRequest.from_prompt(p)).text for p in prompts]
    rec.dump(tmp_path / "s.jsonl")
    replay = MockChatBackend.from_file(tmp_path / "s.jsonl")
    assert [replay.chat(ChatRequest.from_prompt(p)).text for p in prompts] == originals


def test_offline_chat_answers_own_templates():
    chat = OfflineChatBackend(seed=1)
    subs = parse_mqr_response(chat.chat(ChatRequest.from_prompt(render_mqr("zinc and the immune system", 4))).text, 4)
    assert len(subs) == 4
    passage = parse_cqe_response(chat.chat(ChatRequest.from_prompt(render_cqe("A q", ["B q"]))).text)
    assert passage == "A q B q"
    # deterministic in (seed, prompt)
    again = OfflineChatBackend(seed=1).chat(ChatRequest.from_prompt(render_mqr("zinc and the immune system", 4)))
    assert parse_mqr_response(again.text, 4) == subs


# -- offline embedder ------------------------------------------------------------

def test_offline_embed_empty_is_e0():
    v = offline_embed("", 64)
    assert v[0] == 1.0 and np.count_nonzero(v) == 1


def test_offline_embed_scale_invariant():
    np.testing.assert_array_equal(offline_embed("dog dog", 64), offline_embed("dog", 64))


def test_offline_embed_same_bag_cosine_one():
    a = offline_embed("heart disease diet", 256)
    b = offline_embed("diet for heart disease", 256)
    c = offline_embed("Diet, heart-disease!", 256)
    # "for" is an extra token, so a and b differ; a and c have the same multiset
    assert float(a @ c) == pytest.approx(1.0, abs=1e-12)
    assert float(a @ b) < 1.0


def test_offline_embed_unit_norm():
    v = offline_embed("a", 256)
    assert abs(np.sqrt(np.sum(v * v)) - 1.0) <= 1e-9


def test_offline_embed_dim_floor():
    with pytest.raises(ValueError):
        offline_embed("x", 4)


def test_offline_embedder_deterministic():
    e = OfflineEmbedder(128)
    np.testing.assert_array_equal(e.embed(["same text"])[0], e.embed(["same text"])[0])


def test_cache_hits_skip_backend(tmp_path):
    inner = OfflineEmbedder(64)
    cached = CachedEmbedder(inner, tmp_path / "cache")
    first = cached.embed(["alpha", "beta", "alpha"])
    assert inner.texts_embedded == 2
    calls = inner.calls
    second = cached.embed(["beta", "alpha"])
    assert inner.calls == calls
    np.testing.assert_array_equal(first[[1, 0]], second)
    # persisted: a fresh cache over the same directory never calls its backend
    inner2 = OfflineEmbedder(64)
    CachedEmbedder(inner2, tmp_path / "cache").embed(["alpha", "beta"])
    assert inner2.calls == 0


def test_cache_invocations_equal_distinct_texts():
    rng = np.random.default_rng(0)
    vocab = [f"text{i}" for i in range(15)]
    inner = OfflineEmbedder(32)
    cached = CachedEmbedder(inner)
    seen = set()
    for _ in range(20):
        batch = list(rng.choice(vocab, size=rng.integers(1, 6)))
        cached.embed(batch)
        seen.update(batch)
    assert inner.texts_embedded == len(seen)


def test_cache_concurrent_use():
    inner = OfflineEmbedder(32)
    cached = CachedEmbedder(inner)
    texts = [f"t{i % 7}" for i in range(70)]
    threads = [threading.Thread(target=lambda t=t: cached.embed([t])) for t in texts]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for t in set(texts):
        np.testing.assert_array_equal(cached.embed([t])[0], offline_embed(t, 32))


def test_embed_rejects_empty_text():
    with pytest.raises(ValueError):
        OfflineEmbedder(32).embed([""])


# -- wire protocol ---------------------------------------------------------------

class _Handler(BaseHTTPRequestHandler):
    def log_message(self, *args):
        pass

    def do_POST(self):
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        self.server.requests.append((self.path, body, self.headers.get("Authorization")))
        status, payload = self.server.reply(self.path, body)
        data = json.dumps(payload).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)


@pytest.fixture
def server():
    srv = ThreadingHTTPServer(("127.0.0.1", 0), _Handler)
    srv.requests = []
    srv.reply = lambda path, body: (200, {})
    thread = threading.Thread(target=srv.serve_forever, daemon=True)
    thread.start()
    yield srv
    srv.shutdown()


def base(srv):
    return f"http://127.0.0.1:{srv.server_address[1]}"


def test_http_chat_wire_format(server):
    server.reply = lambda path, body: (200, {"choices": [{"message": {"content": "1. x"}}],
                                             "usage": {"completion_tokens": 7}})
    chat = HttpChatBackend(base(server), "secret", model="m")
    resp = chat.chat(ChatRequest.from_prompt("hello", seed=5))
    assert resp.text == "1. x" and resp.completion_tokens == 7
    path, body, auth = server.requests[0]
    assert path == "/v1/chat/completions"
    assert auth == "Bearer secret"
    assert body["model"] == "m"
    assert body["messages"] == [{"role": "user", "content": "hello"}]
    assert (body["temperature"], body["top_p"], body["top_k"], body["seed"]) == (0.7, 0.8, 20, 5)
    assert "max_tokens" in body


def test_http_chat_omits_unset_top_k(server):
    server.reply = lambda path, body: (200, {"choices": [{"message": {"content": "ok"}}]})
    HttpChatBackend(base(server), "").chat(ChatRequest.from_prompt("x", top_k=None))
    assert "top_k" not in server.requests[0][1]


def test_http_chat_env_credentials(server, monkeypatch):
    monkeypatch.setenv("MOLER_API_BASE", base(server))
    monkeypatch.setenv("MOLER_API_KEY", "k2")
    server.reply = lambda path, body: (200, {"choices": [{"message": {"content": "ok"}}]})
    HttpChatBackend().chat(ChatRequest.from_prompt("x"))
    assert server.requests[0][2] == "Bearer k2"


def test_http_chat_errors(server):
    chat = HttpChatBackend(base(server), "")
    server.reply = lambda path, body: (500, {"error": "boom"})
    with pytest.raises(BackendStatusError):
        chat.chat(ChatRequest.from_prompt("x"))
    server.reply = lambda path, body: (200, {"choices": [{"message": {"content": "  "}}]})
    with pytest.raises(EmptyCompletion):
        chat.chat(ChatRequest.from_prompt("x"))


def test_http_transport_retry_once(monkeypatch):
    import moler.backends as b
    monkeypatch.setattr(b, "RETRY_BACKOFF_SECONDS", 0.0)
    chat = HttpChatBackend("http://127.0.0.1:9", "", timeout=0.5)
    attempts = []
    real_post = chat.session.post

    def counting_post(*a, **k):
        attempts.append(1)
        return real_post(*a, **k)

    chat.session.post = counting_post
    with pytest.raises(TransportError):
        chat.chat(ChatRequest.from_prompt("x"))
    assert len(attempts) == 2


def test_http_embeddings_wire_format(server):
    def reply(path, body):
        return 200, {"data": [{"index": i, "embedding": [float(len(t)), 1.0, 0.0]}
                              for i, t in enumerate(body["input"])]}
    server.reply = reply
    emb = HttpEmbedder(base(server), "k", model="e", batch_size=2)
    out = emb.embed(["a", "bbb", "cc"])
    assert out.shape == (3, 3)
    np.testing.assert_array_equal(out[:, 0], [1.0, 3.0, 2.0])
    assert [r[0] for r in server.requests] == ["/v1/embeddings"] * 2
    assert server.requests[0][1] == {"model": "e", "input": ["a", "bbb"]}


def test_http_embeddings_dimension_mismatch(server):
    server.reply = lambda path, body: (200, {"data": [{"index": 0, "embedding": [1.0, 2.0]},
                                                      {"index": 1, "embedding": [1.0]}]})
    with pytest.raises(EmbeddingError):
        HttpEmbedder(base(server), "").embed(["a", "b"])
