"""Chat backends: transcript playback for tests, and a chat-completions HTTP client."""
from __future__ import annotations

import json
import logging
import os
import socket
import time
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping, Protocol, Sequence

logger = logging.getLogger(__name__)

ROLES = ("advisor", "grounding", "monitor", "robotic")
RETRY_STATUSES = {429, 500, 502, 503, 504}


class BackendError(RuntimeError):
    def __init__(self, status: int | None, excerpt: str = ""):
        self.status = status
        self.excerpt = excerpt
        super().__init__(f"backend error {status}: {excerpt}")


class Timeout(BackendError):
    def __init__(self, excerpt: str = "request timed out"):
        super().__init__(None, excerpt)


class TranscriptExhausted(BackendError):
    def __init__(self, role: str, turn: int):
        self.role = role
        self.turn = turn
        RuntimeError.__init__(self, f"transcript has no reply for {role} turn {turn}")
        self.status = None
        self.excerpt = ""


@dataclass(frozen=True)
class BackendConfig:
    kind: str = "scripted"
    endpoint: str | None = None
    model: str = ""
    api_key_env: str = "GRAPPA_API_KEY"
    temperature: float = 0.0
    max_tokens: int = 2000
    timeout: float = 60.0
    transcript: str | None = None
    retries: int = 3
    backoff: float = 1.0

    def __post_init__(self):
        if self.kind not in ("scripted", "http"):
            raise ValueError(f"backend kind must be 'scripted' or 'http', got {self.kind!r}")
        if self.temperature != 0:
            raise ValueError("temperature is fixed at 0 for reproducibility")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be >= 1")
        if self.kind == "http" and not self.endpoint:
            raise ValueError("http backend needs an endpoint")
        if self.kind == "scripted" and not self.transcript:
            raise ValueError("scripted backend needs a transcript path")
        if self.retries < 0:
            raise ValueError("retries must be >= 0")


class Backend(Protocol):
    def complete(self, role: str, messages: Sequence[Mapping[str, str]]) -> str:
        ...


class ScriptedBackend:
    """Replays recorded replies keyed by (role, per-role turn index).

    The turn counters persist across conversations, so one transcript can
    script several generate/monitor rounds in sequence.
    """

    def __init__(self, replies: Mapping[str, Sequence[str]], meta: Mapping[str, Any] | None = None):
        unknown = set(replies) - set(ROLES)
        if unknown:
            raise ValueError(f"transcript has replies for unknown roles {sorted(unknown)}")
        self.replies = {role: list(texts) for role, texts in replies.items()}
        self.meta = dict(meta or {})
        self.turns = {role: 0 for role in ROLES}
        self.requests: list[tuple[str, list[dict]]] = []

    @classmethod
    def from_file(cls, path: str | Path) -> ScriptedBackend:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        replies = data.get("replies", data)
        meta = {k: v for k, v in data.items() if k != "replies"} if "replies" in data else {}
        return cls(replies, meta)

    def complete(self, role: str, messages: Sequence[Mapping[str, str]]) -> str:
        turn = self.turns.get(role, 0)
        self.requests.append((role, [dict(m) for m in messages]))
        texts = self.replies.get(role, [])
        if turn >= len(texts):
            raise TranscriptExhausted(role, turn)
        self.turns[role] = turn + 1
        return texts[turn]


Opener = Callable[..., Any]


class HttpBackend:
    """Chat-completions client on urllib with retry and exponential backoff."""

    def __init__(self, cfg: BackendConfig, opener: Opener | None = None, sleep: Callable[[float], None] = time.sleep):
        if cfg.kind != "http":
            raise ValueError("HttpBackend needs an http config")
        self.cfg = cfg
        self.opener = opener or urllib.request.urlopen
        self.sleep = sleep

    def payload(self, messages: Sequence[Mapping[str, str]]) -> dict[str, Any]:
        return {
            "model": self.cfg.model,
            "messages": [{"role": m["role"], "content": m["content"]} for m in messages],
            "temperature": 0,
            "max_tokens": self.cfg.max_tokens,
        }

    def _request(self, body: bytes) -> urllib.request.Request:
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.cfg.api_key_env, "")
        if key:
            headers["Authorization"] = f"Bearer {key}"
        return urllib.request.Request(self.cfg.endpoint, data=body, headers=headers, method="POST")

    def complete(self, role: str, messages: Sequence[Mapping[str, str]]) -> str:
        body = json.dumps(self.payload(messages)).encode("utf-8")
        last: BackendError | None = None
        for attempt in range(self.cfg.retries + 1):
            if attempt:
                self.sleep(self.cfg.backoff * 2 ** (attempt - 1))
            try:
                with self.opener(self._request(body), timeout=self.cfg.timeout) as resp:
                    raw = resp.read().decode("utf-8")
            except urllib.error.HTTPError as exc:
                excerpt = exc.read().decode("utf-8", "replace")[:200] if exc.fp else ""
                last = BackendError(exc.code, excerpt)
                if exc.code not in RETRY_STATUSES:
                    raise last from None
                logger.info("backend returned %s, attempt %d", exc.code, attempt + 1)
                continue
            except (socket.timeout, TimeoutError):
                last = Timeout()
                continue
            except urllib.error.URLError as exc:
                if isinstance(exc.reason, (socket.timeout, TimeoutError)):
                    last = Timeout()
                    continue
                last = BackendError(None, str(exc.reason)[:200])
                continue
            try:
                return json.loads(raw)["choices"][0]["message"]["content"]
            except (ValueError, KeyError, IndexError, TypeError):
                raise BackendError(200, f"malformed response: {raw[:200]}") from None
        assert last is not None
        raise last


def make_backend(cfg: BackendConfig, **kwargs) -> Backend:
    if cfg.kind == "scripted":
        return ScriptedBackend.from_file(cfg.transcript)
    return HttpBackend(cfg, **kwargs)


def backend_complete(cfg: BackendConfig, messages: Sequence[Mapping[str, str]], role: str = "advisor") -> str:
    """One-shot completion through a fresh backend built from ``cfg``."""
    return make_backend(cfg).complete(role, messages)
