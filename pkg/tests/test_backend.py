import json
import logging

import httpx
import pytest

from inspectgate.backend import (
    BackendFactory,
    BackendProfile,
    ChatRequest,
    ConstantBackend,
    FrameRef,
    HttpChatBackend,
    HttpEmbeddingBackend,
    KeyedBackend,
    Message,
    ScriptBook,
    ScriptedBackend,
    StubEmbedder,
    Transcript,
    load_profile,
    prompt_hash,
)
from inspectgate.errors import (
    BackendError,
    DimensionMismatch,
    HttpError,
    RateLimited,
    RejectedInput,
    ScriptExhausted,
    ScriptMismatch,
    Timeout,
)
from inspectgate.timeline import Timestamp

SECRET = "sk-test-very-secret-token-123"


def ok(text="hello"):
    return httpx.Response(200, json={"choices": [{"message": {"role": "assistant", "content": text}}]})


def client_for(responses, seen=None):
    queue = list(responses)

    def handler(request: httpx.Request):
        if seen is not None:
            seen.append(request)
        item = queue.pop(0)
        if isinstance(item, Exception):
            raise item
        return item

    return httpx.Client(transport=httpx.MockTransport(handler))


def http_backend(responses, seen=None, retries=3, transcript=None):
    profile = BackendProfile(kind="http", endpoint="http://model.local/v1", model_id="m", retries=retries, backoff_s=0.5, token_env="IG_TEST_TOKEN")
    sleeps = []
    b = HttpChatBackend(profile, transcript, client_for(responses, seen), resolve_frame=lambda r: f"frame://{r.video_id}/{r.timestamp.seconds:g}", sleep=sleeps.append)
    return b, sleeps


REQ = ChatRequest((Message("user", "hi"),), purpose="planner")


class TestHttpChat:
    def test_success_and_wire_format(self, monkeypatch):
        monkeypatch.setenv("IG_TEST_TOKEN", SECRET)
        seen = []
        b, _ = http_backend([ok("yo")], seen)
        assert b.chat(REQ) == "yo"
        body = json.loads(seen[0].content)
        assert body["model"] == "m" and body["messages"] == [{"role": "user", "content": "hi"}] and body["stream"] is False
        assert seen[0].url == "http://model.local/v1/chat/completions"
        assert seen[0].headers["Authorization"] == f"Bearer {SECRET}"

    def test_media_become_image_parts(self):
        seen = []
        b, _ = http_backend([ok()], seen)
        req = ChatRequest((Message("user", "look", (FrameRef("v1", Timestamp(3)),)),))
        b.chat(req)
        content = json.loads(seen[0].content)["messages"][0]["content"]
        assert content == [{"type": "text", "text": "look"}, {"type": "image_url", "image_url": {"url": "frame://v1/3"}}]

    def test_retries_429_and_5xx_with_exponential_backoff(self):
        b, sleeps = http_backend([httpx.Response(429), httpx.Response(503), ok("done")])
        assert b.chat(REQ) == "done"
        assert sleeps == [0.5, 1.0] and b.last_retries == 2

    def test_retries_timeouts(self):
        b, sleeps = http_backend([httpx.ReadTimeout("slow"), ok("done")])
        assert b.chat(REQ) == "done" and sleeps == [0.5]

    def test_gives_up_after_budget(self):
        b, sleeps = http_backend([httpx.Response(429)] * 3, retries=2)
        with pytest.raises(RateLimited):
            b.chat(REQ)
        assert len(sleeps) == 2

    def test_timeout_exhaustion_raises_timeout(self):
        b, _ = http_backend([httpx.ConnectTimeout("x")] * 2, retries=1)
        with pytest.raises(Timeout):
            b.chat(REQ)

    def test_client_error_not_retried(self):
        b, sleeps = http_backend([httpx.Response(400, text="bad")])
        with pytest.raises(HttpError) as info:
            b.chat(REQ)
        assert info.value.status == 400 and sleeps == []

    def test_bad_body(self):
        b, _ = http_backend([httpx.Response(200, json={"nope": 1})])
        with pytest.raises(BackendError):
            b.chat(REQ)

    def test_token_never_logged_or_transcribed(self, monkeypatch, tmp_path, caplog):
        monkeypatch.setenv("IG_TEST_TOKEN", SECRET)
        tr = Transcript(tmp_path / "t.jsonl")
        caplog.set_level(logging.DEBUG)
        b, _ = http_backend([httpx.Response(500), ok("fine"), httpx.Response(401, text="denied")], transcript=tr)
        b.chat(REQ)
        with pytest.raises(HttpError):
            b.chat(REQ)
        text = (tmp_path / "t.jsonl").read_text()
        assert SECRET not in text and SECRET not in caplog.text
        assert SECRET not in json.dumps(b.profile.public())
        entries = [json.loads(l) for l in text.splitlines()]
        assert entries[0]["attempts"] == 2 and entries[1]["error"]


class TestEmbeddings:
    def test_http_embed_orders_by_index(self):
        resp = httpx.Response(200, json={"data": [{"index": 1, "embedding": [0, 1]}, {"index": 0, "embedding": [1, 0]}]})
        profile = BackendProfile(kind="http", endpoint="http://e", model_id="e")
        e = HttpEmbeddingBackend(profile, client_for([resp]))
        assert e.embed(["a", "b"]) == [[1.0, 0.0], [0.0, 1.0]]

    def test_mixed_dims(self):
        resp = httpx.Response(200, json={"data": [{"index": 0, "embedding": [1]}, {"index": 1, "embedding": [1, 2]}]})
        e = HttpEmbeddingBackend(BackendProfile(kind="http", endpoint="http://e"), client_for([resp]))
        with pytest.raises(DimensionMismatch):
            e.embed(["a", "b"])

    def test_stub_is_deterministic_unit_norm(self):
        a, b = StubEmbedder(8), StubEmbedder(8)
        v = a.embed(["x"])[0]
        assert v == b.embed(["x"])[0] and abs(sum(x * x for x in v) - 1) < 1e-12
        assert v != a.embed(["y"])[0]


class TestScripted:
    def test_replays_in_order_then_exhausts(self):
        s = ScriptedBackend.replies(["a", "b"])
        assert [s.chat(REQ), s.chat(REQ)] == ["a", "b"]
        with pytest.raises(ScriptExhausted):
            s.chat(REQ)

    def test_matchers(self):
        s = ScriptedBackend([("hi", "sub"), (f"sha256:{prompt_hash('hi')}", "hash"), (lambda r: r.purpose == "planner", "pred")])
        assert [s.chat(REQ) for _ in range(3)] == ["sub", "hash", "pred"]

    def test_mismatch_shows_diff(self):
        s = ScriptedBackend([("something else", "x")])
        with pytest.raises(ScriptMismatch, match="something else"):
            s.chat(REQ)

    def test_exception_response_is_raised(self):
        s = ScriptedBackend.replies([RateLimited("slow down")])
        with pytest.raises(RateLimited):
            s.chat(REQ)

    def test_keyed_and_constant(self):
        assert ConstantBackend("c").chat(REQ) == "c"
        assert KeyedBackend({prompt_hash("hi"): "k"}).chat(REQ) == "k"

    def test_script_book(self, tmp_path):
        p = tmp_path / "s.json"
        p.write_text(json.dumps({"q1": ["a", "b"], "*": "dflt"}))
        book = ScriptBook.load(p)
        b1 = book.backend_for("q1")
        assert (b1.chat(REQ), b1.chat(REQ)) == ("a", "b")
        assert book.backend_for("zzz").chat(REQ) == "dflt"


class TestProfiles:
    def test_stub_specs(self):
        assert load_profile("stub:12").dim == 12 and load_profile("stub").kind == "stub"

    def test_relative_script_resolves_against_profile(self, tmp_path):
        (tmp_path / "p.json").write_text(json.dumps({"kind": "script", "script": "s.json"}))
        assert load_profile(tmp_path / "p.json").script == str((tmp_path / "s.json").resolve())

    def test_unknown_keys_rejected(self, tmp_path):
        (tmp_path / "p.json").write_text(json.dumps({"kind": "http", "api_key": "oops"}))
        with pytest.raises(RejectedInput):
            load_profile(tmp_path / "p.json")

    def test_factory_requires_core_roles(self):
        with pytest.raises(RejectedInput):
            BackendFactory({}).for_question("q")
