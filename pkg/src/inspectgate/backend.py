"""Adapters to model services plus deterministic test doubles.

Every backend is a small object with one method: chat backends expose
``chat(request) -> str`` and embedders expose ``embed(texts) -> list of
vectors``. The HTTP adapters speak the chat-completion JSON wire format.
"""

from __future__ import annotations

import base64
import difflib
import hashlib
import json
import logging
import os
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Protocol, Sequence, Union

import httpx
import numpy as np

from .errors import (
    BackendError,
    DimensionMismatch,
    HttpError,
    RateLimited,
    RejectedInput,
    ScriptExhausted,
    ScriptMismatch,
    Timeout,
)
from .timeline import Timestamp

log = logging.getLogger(__name__)

ROLES = ("system", "user", "assistant")


@dataclass(frozen=True)
class FrameRef:
    video_id: str
    timestamp: Timestamp
    max_edge_px: int = 1024

    def to_dict(self) -> dict:
        return {"video_id": self.video_id, "t": self.timestamp.seconds, "max_edge_px": self.max_edge_px}


@dataclass(frozen=True)
class Message:
    role: str
    text: str
    media: tuple[FrameRef, ...] = ()

    def __post_init__(self) -> None:
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")
        if self.media and self.role != "user":
            raise ValueError("media may only be attached to user messages")


@dataclass(frozen=True)
class ChatRequest:
    messages: tuple[Message, ...]
    model_id: str = ""
    temperature: float = 0.0
    max_tokens: int = 1024
    purpose: str = ""  # planner / inspector / filter / judge, used for transcripts only

    def __post_init__(self) -> None:
        if not self.messages:
            raise ValueError("a chat request needs at least one message")

    @property
    def prompt(self) -> str:
        """Text of the last message, i.e. the rendered prompt for this call."""
        return self.messages[-1].text

    def elided(self) -> dict:
        return {
            "purpose": self.purpose,
            "model_id": self.model_id,
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
            "messages": [
                {"role": m.role, "text": m.text, "media": [f.to_dict() for f in m.media]} for m in self.messages
            ],
        }


def prompt_hash(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


class ChatBackend(Protocol):
    def chat(self, request: ChatRequest) -> str: ...


class EmbeddingBackend(Protocol):
    def embed(self, texts: Sequence[str]) -> list[list[float]]: ...


@dataclass(frozen=True)
class BackendProfile:
    kind: str = "http"  # http | script | stub
    endpoint: str = ""
    model_id: str = ""
    token_env: str = "OPENAI_API_KEY"
    timeout_s: float = 60.0
    retries: int = 3
    backoff_s: float = 1.0
    temperature: float = 0.0
    max_tokens: int = 1024
    media_mode: str = "data_uri"  # data_uri | path
    frame_root: str = "frames"
    script: str | None = None
    dim: int = 64

    def __post_init__(self) -> None:
        if self.retries < 0:
            raise ValueError("retry budget must be >= 0")
        if self.kind not in ("http", "script", "stub"):
            raise ValueError(f"unknown profile kind {self.kind!r}")

    def public(self) -> dict:
        # token_env is the variable *name*; the secret itself never leaves os.environ
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "BackendProfile":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise RejectedInput(f"unknown profile keys: {sorted(unknown)}")
        return cls(**d)


def load_profile(spec: str | Path) -> BackendProfile:
    """``stub`` / ``stub:<dim>`` or the path of a JSON profile file."""
    text = str(spec)
    if text == "stub" or text.startswith("stub:"):
        dim = int(text.split(":", 1)[1]) if ":" in text else 64
        return BackendProfile(kind="stub", dim=dim)
    path = Path(text)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise RejectedInput(f"cannot read profile {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise RejectedInput(f"profile {path} is not JSON: {exc}") from exc
    if data.get("kind") == "script" and data.get("script") and not Path(data["script"]).is_absolute():
        data["script"] = str((path.parent / data["script"]).resolve())
    return BackendProfile.from_dict(data)


class Transcript:
    """Append-only log of request/response pairs; media reduced to FrameRefs."""

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path else None
        self.entries: list[dict] = []
        self._lock = threading.Lock()

    def append(self, request: ChatRequest, response: str | None = None, error: str | None = None, attempts: int = 1):
        entry = {"request": request.elided(), "response": response, "error": error, "attempts": attempts}
        with self._lock:
            self.entries.append(entry)
            if self.path is not None:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with self.path.open("a", encoding="utf-8") as fh:
                    fh.write(json.dumps(entry, ensure_ascii=False, sort_keys=True) + "\n")


FrameResolver = Callable[[FrameRef], str]


def file_frame_resolver(root: str | Path, media_mode: str = "data_uri") -> FrameResolver:
    """Frames are expected pre-extracted at ``<root>/<video_id>/<seconds:06d>.jpg``."""
    root = Path(root)

    def resolve(ref: FrameRef) -> str:
        path = root / ref.video_id / f"{int(ref.timestamp.seconds):06d}.jpg"
        if media_mode == "path":
            return path.resolve().as_uri()
        try:
            payload = base64.b64encode(path.read_bytes()).decode("ascii")
        except OSError as exc:
            raise BackendError(f"frame not available: {path}") from exc
        return f"data:image/jpeg;base64,{payload}"

    return resolve


class HttpChatBackend:
    def __init__(
        self,
        profile: BackendProfile,
        transcript: Transcript | None = None,
        client: httpx.Client | None = None,
        resolve_frame: FrameResolver | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.profile = profile
        self.transcript = transcript
        self.client = client or httpx.Client(timeout=profile.timeout_s)
        self.resolve_frame = resolve_frame or file_frame_resolver(profile.frame_root, profile.media_mode)
        self.sleep = sleep
        self.last_retries = 0

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        token = os.environ.get(self.profile.token_env, "")
        if token:
            headers["Authorization"] = f"Bearer {token}"
        return headers

    def _wire_message(self, m: Message) -> dict:
        if not m.media:
            return {"role": m.role, "content": m.text}
        parts: list[dict] = [{"type": "text", "text": m.text}]
        for ref in m.media:
            parts.append({"type": "image_url", "image_url": {"url": self.resolve_frame(ref)}})
        return {"role": m.role, "content": parts}

    def payload(self, request: ChatRequest) -> dict:
        return {
            "model": request.model_id or self.profile.model_id,
            "messages": [self._wire_message(m) for m in request.messages],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
            "stream": False,
        }

    def _post(self, path: str, body: dict) -> dict:
        url = self.profile.endpoint.rstrip("/") + path
        attempt = 0
        while True:
            try:
                resp = self.client.post(url, json=body, headers=self._headers(), timeout=self.profile.timeout_s)
            except httpx.TimeoutException as exc:
                err: BackendError = Timeout(f"{url} timed out after {self.profile.timeout_s}s")
                cause: Exception | None = exc
            except httpx.HTTPError as exc:
                raise BackendError(f"transport error talking to {url}: {type(exc).__name__}") from exc
            else:
                if resp.status_code == 200:
                    self.last_retries = attempt
                    try:
                        return resp.json()
                    except ValueError as exc:
                        raise BackendError("response body is not JSON") from exc
                if resp.status_code == 429:
                    err, cause = RateLimited(resp.text[:200]), None
                elif resp.status_code >= 500:
                    err, cause = HttpError(resp.status_code, resp.text[:200]), None
                else:
                    raise HttpError(resp.status_code, resp.text[:200])
            if attempt >= self.profile.retries:
                self.last_retries = attempt
                raise err from cause
            delay = self.profile.backoff_s * (2**attempt)
            log.warning("retrying %s after %s (attempt %d/%d, sleeping %.2fs)", url, err, attempt + 1, self.profile.retries, delay)
            self.sleep(delay)
            attempt += 1

    def chat(self, request: ChatRequest) -> str:
        try:
            data = self._post("/chat/completions", self.payload(request))
            text = _content_text(data)
        except BackendError as exc:
            if self.transcript:
                self.transcript.append(request, error=str(exc), attempts=self.last_retries + 1)
            raise
        if self.transcript:
            self.transcript.append(request, response=text, attempts=self.last_retries + 1)
        return text


def _content_text(data: Any) -> str:
    try:
        content = data["choices"][0]["message"]["content"]
    except (KeyError, IndexError, TypeError) as exc:
        raise BackendError("response has no choices[0].message.content") from exc
    if isinstance(content, list):
        content = "".join(p.get("text", "") for p in content if isinstance(p, dict))
    if not isinstance(content, str):
        raise BackendError("message content is not text")
    return content


def _check_vectors(vectors: list, expected: int) -> list[list[float]]:
    if len(vectors) != expected:
        raise BackendError(f"expected {expected} embeddings, got {len(vectors)}")
    dims = {len(v) for v in vectors}
    if len(dims) > 1:
        raise DimensionMismatch(f"embedding batch has mixed dimensions {sorted(dims)}")
    return [[float(x) for x in v] for v in vectors]


class HttpEmbeddingBackend:
    def __init__(self, profile: BackendProfile, client: httpx.Client | None = None, sleep=time.sleep):
        self._chat = HttpChatBackend(profile, client=client, resolve_frame=lambda ref: "", sleep=sleep)
        self.profile = profile

    def embed(self, texts: Sequence[str]) -> list[list[float]]:
        if not texts:
            raise RejectedInput("embed needs a non-empty batch")
        data = self._chat._post("/embeddings", {"model": self.profile.model_id, "input": list(texts)})
        try:
            items = sorted(data["data"], key=lambda d: d.get("index", 0))
            vectors = [d["embedding"] for d in items]
        except (KeyError, TypeError) as exc:
            raise BackendError("embedding response lacks data[].embedding") from exc
        return _check_vectors(vectors, len(texts))


class StubEmbedder:
    """Deterministic hash-to-unit-vector embedder for offline work."""

    def __init__(self, dim: int = 64):
        if dim < 1:
            raise ValueError("dim must be >= 1")
        self.dim = dim

    def vector(self, text: str) -> list[float]:
        digest = hashlib.sha256(text.encode("utf-8")).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "big"))
        v = rng.standard_normal(self.dim)
        norm = float(np.linalg.norm(v))
        if norm == 0.0:  # pragma: no cover - measure-zero event
            v[0], norm = 1.0, 1.0
        return [float(x) for x in v / norm]

    def embed(self, texts: Sequence[str]) -> list[list[float]]:
        if not texts:
            raise RejectedInput("embed needs a non-empty batch")
        return [self.vector(t) for t in texts]


class FunctionEmbedder:
    def __init__(self, fn: Callable[[str], Sequence[float]]):
        self.fn = fn

    def embed(self, texts: Sequence[str]) -> list[list[float]]:
        if not texts:
            raise RejectedInput("embed needs a non-empty batch")
        return _check_vectors([list(self.fn(t)) for t in texts], len(texts))


# --- scripted doubles -----------------------------------------------------------

Matcher = Union[None, str, Callable[[ChatRequest], bool]]
Response = Union[str, BaseException, Callable[[ChatRequest], str]]


def _matches(matcher: Matcher, request: ChatRequest) -> bool:
    if matcher is None or matcher == "*":
        return True
    if callable(matcher):
        return bool(matcher(request))
    if matcher.startswith("sha256:"):
        return prompt_hash(request.prompt) == matcher[len("sha256:") :]
    return matcher in request.prompt


def _respond(response: Response, request: ChatRequest) -> str:
    if isinstance(response, BaseException):
        raise response
    if callable(response):
        return response(request)
    return response


class ScriptedBackend:
    """Replays ``(matcher, response)`` entries strictly in order.

    A matcher is None/"*" (anything), ``"sha256:<hex>"`` of the prompt, a
    substring of the prompt, or a predicate. A response may be an exception
    instance, which is raised instead of returned.
    """

    def __init__(self, script: Iterable[tuple[Matcher, Response]], name: str = "scripted"):
        self.script = list(script)
        self.name = name
        self.calls: list[ChatRequest] = []
        self._pos = 0

    @classmethod
    def replies(cls, responses: Iterable[Response], name: str = "scripted") -> "ScriptedBackend":
        return cls([(None, r) for r in responses], name)

    @property
    def remaining(self) -> int:
        return len(self.script) - self._pos

    def chat(self, request: ChatRequest) -> str:
        self.calls.append(request)
        if self._pos >= len(self.script):
            raise ScriptExhausted(f"{self.name}: call #{len(self.calls)} has no script entry")
        matcher, response = self.script[self._pos]
        if not _matches(matcher, request):
            expected = matcher if isinstance(matcher, str) else repr(matcher)
            diff = "\n".join(
                difflib.unified_diff(
                    expected.splitlines(), request.prompt.splitlines(), "expected", "actual", lineterm=""
                )
            )
            raise ScriptMismatch(f"{self.name}: entry {self._pos} did not match\n{diff}")
        self._pos += 1
        return _respond(response, request)


class KeyedBackend:
    """Canned responses keyed by the SHA-256 of the rendered prompt."""

    def __init__(self, table: dict[str, str], name: str = "keyed"):
        self.table = dict(table)
        self.name = name

    def chat(self, request: ChatRequest) -> str:
        key = prompt_hash(request.prompt)
        if key not in self.table:
            raise ScriptExhausted(f"{self.name}: no response for prompt sha256:{key[:16]}...")
        return self.table[key]


class ConstantBackend:
    def __init__(self, response: Response):
        self.response = response
        self.calls = 0

    def chat(self, request: ChatRequest) -> str:
        self.calls += 1
        return _respond(self.response, request)


class FunctionBackend:
    def __init__(self, fn: Callable[[ChatRequest], str]):
        self.fn = fn

    def chat(self, request: ChatRequest) -> str:
        return self.fn(request)


class ScriptBook:
    """Per-question scripts loaded from JSON, for scripted CLI runs.

    File layout::

        {"q1": ["reply 1", "reply 2"], "q2": "same reply every call", "*": [...]}

    A list is consumed in order (one fresh ScriptedBackend per episode); a
    string is returned for every call. ``"*"`` is used for ids without an
    entry of their own.
    """

    def __init__(self, table: dict[str, Any], name: str = "script"):
        self.table = table
        self.name = name

    @classmethod
    def load(cls, path: str | Path) -> "ScriptBook":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise RejectedInput(f"cannot load script {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise RejectedInput(f"script {path} must be a JSON object keyed by question_id")
        return cls(data, Path(path).stem)

    def backend_for(self, key: str) -> ChatBackend:
        entry = self.table.get(key, self.table.get("*"))
        if entry is None:
            return ScriptedBackend([], f"{self.name}[{key}]")
        if isinstance(entry, str):
            return ConstantBackend(entry)
        return ScriptedBackend.replies(entry, f"{self.name}[{key}]")


@dataclass
class Backends:
    planner: ChatBackend
    inspector: ChatBackend
    filter: ChatBackend
    embedder: EmbeddingBackend
    judge: ChatBackend | None = None
    profiles: dict[str, dict] = field(default_factory=dict)


class BackendFactory:
    """Builds per-question backend sets from profiles (scripts are per question)."""

    def __init__(self, profiles: dict[str, BackendProfile], transcript: Transcript | None = None):
        self.profiles = profiles
        self.transcript = transcript
        self._books: dict[str, ScriptBook] = {}
        self._shared: dict[str, Any] = {}
        self._lock = threading.Lock()

    def chat_for(self, role: str, question_id: str) -> ChatBackend | None:
        profile = self.profiles.get(role)
        if profile is None:
            return None
        if profile.kind == "script":
            with self._lock:
                if role not in self._books:
                    if not profile.script:
                        raise RejectedInput(f"{role} profile of kind 'script' needs a script path")
                    self._books[role] = ScriptBook.load(profile.script)
            return self._books[role].backend_for(question_id)
        if profile.kind == "http":
            with self._lock:
                if role not in self._shared:
                    self._shared[role] = HttpChatBackend(profile, transcript=self.transcript)
            return self._shared[role]
        raise RejectedInput(f"{role} profile kind {profile.kind!r} cannot chat")

    def embedder(self) -> EmbeddingBackend:
        profile = self.profiles.get("embedder", BackendProfile(kind="stub"))
        if profile.kind == "stub":
            return StubEmbedder(profile.dim)
        if profile.kind == "http":
            return HttpEmbeddingBackend(profile)
        raise RejectedInput("embedder profile must be 'stub' or 'http'")

    def for_question(self, question_id: str) -> Backends:
        missing = [r for r in ("planner", "inspector", "filter") if r not in self.profiles]
        if missing:
            raise RejectedInput(f"missing backend profiles: {', '.join(missing)}")
        return Backends(
            planner=self.chat_for("planner", question_id),
            inspector=self.chat_for("inspector", question_id),
            filter=self.chat_for("filter", question_id),
            embedder=self.embedder(),
            judge=self.chat_for("judge", question_id),
            profiles={k: p.public() for k, p in self.profiles.items()},
        )
