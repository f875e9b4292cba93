"""Remote model access: prompt templates, message rendering and a chat client.

Templates live in ``plancentric/prompts/*.txt`` verbatim. A template's first
paragraph becomes the system message and the rest the user message.
Placeholders look like ``{QUERY}`` or ``{DISCRETE MEMORY}``.

The wire format is the widely served chat-completions protocol::

    POST <endpoint_url>
    {"model": ..., "messages": [{"role": "user", "content": [
        {"type": "text", "text": "..."},
        {"type": "image_url", "image_url": {"url": "data:image/png;base64,..."}}]}],
     "temperature": 0.7, "max_tokens": 512}

and the reply text is read from ``choices[0].message.content``.
"""

from __future__ import annotations

import json
import logging
import os
import random
import re
import threading
import time
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence, Union

import httpx

logger = logging.getLogger(__name__)

TEMPLATE_IDS = ("plan_generate", "plan_update", "action_generate", "memory_gate", "judge_eval")

# Bindings appended after a template body. The stock action and judge
# prompts stop before the observation material, so it is added here.
TRAILERS: dict[str, str] = {
    "action_generate": "Current Subgoal: {SUBGOAL}\nCurrent Observation: {SCREENSHOT}\n",
    "judge_eval": "{SCREENSHOTS}\n",
}

_PLACEHOLDER = re.compile(r"\{([A-Za-z_][A-Za-z_ ]*)\}")


class PromptError(ValueError):
    pass


class UnboundPlaceholderError(PromptError):
    pass


class UnexpectedBindingError(PromptError):
    pass


class ChatTransportError(RuntimeError):
    def __init__(self, message: str, status: int | None = None, attempts: int = 0):
        super().__init__(message)
        self.status = status
        self.attempts = attempts


class ChatProtocolError(RuntimeError):
    pass


@dataclass(frozen=True)
class ImagePart:
    data_b64: str
    media_type: str = "image/png"


Part = Union[str, ImagePart]
Binding = Union[str, ImagePart, Sequence[Part]]


@dataclass(frozen=True)
class ChatMessage:
    role: str
    parts: tuple[Part, ...]

    def __post_init__(self) -> None:
        if self.role not in ("system", "user", "assistant"):
            raise ValueError(f"bad role {self.role!r}")
        if not self.parts:
            raise ValueError("a message needs at least one part")

    @property
    def text(self) -> str:
        return "".join(p for p in self.parts if isinstance(p, str))

    def to_wire(self) -> dict[str, Any]:
        content = []
        for p in self.parts:
            if isinstance(p, ImagePart):
                url = f"data:{p.media_type};base64,{p.data_b64}"
                content.append({"type": "image_url", "image_url": {"url": url}})
            else:
                content.append({"type": "text", "text": p})
        return {"role": self.role, "content": content}


@lru_cache(maxsize=None)
def load_template(template_id: str) -> str:
    if template_id not in TEMPLATE_IDS:
        raise PromptError(f"unknown template {template_id!r}")
    return (resources.files("plancentric") / "prompts" / f"{template_id}.txt").read_text()


def template_placeholders(template_id: str) -> list[str]:
    body = load_template(template_id) + TRAILERS.get(template_id, "")
    seen: list[str] = []
    for name in _PLACEHOLDER.findall(body):
        if name not in seen:
            seen.append(name)
    return seen


def _substitute(text: str, bindings: Mapping[str, Binding]) -> list[Part]:
    parts: list[Part] = []

    def add(p: Part) -> None:
        if isinstance(p, str):
            if not p:
                return
            if parts and isinstance(parts[-1], str):
                parts[-1] += p
                return
        parts.append(p)

    pos = 0
    for m in _PLACEHOLDER.finditer(text):
        add(text[pos:m.start()])
        value = bindings[m.group(1)]
        if isinstance(value, (str, ImagePart)):
            add(value)
        else:
            for p in value:
                add(p)
        pos = m.end()
    add(text[pos:])
    return parts


def render_prompt(template_id: str, bindings: Mapping[str, Binding]) -> list[ChatMessage]:
    """Fill a template; returns ``[system, user]`` messages.

    Every placeholder must be bound and no extra keys are accepted.
    """
    body = load_template(template_id)
    names = template_placeholders(template_id)
    missing = [n for n in names if n not in bindings]
    if missing:
        raise UnboundPlaceholderError(f"{template_id}: unbound placeholder(s) {missing}")
    extra = sorted(set(bindings) - set(names))
    if extra:
        raise UnexpectedBindingError(f"{template_id}: unexpected binding(s) {extra}")
    system_text, _, user_text = body.partition("\n\n")
    user_text += TRAILERS.get(template_id, "")
    return [
        ChatMessage("system", tuple(_substitute(system_text, bindings)) or ("",)),
        ChatMessage("user", tuple(_substitute(user_text, bindings)) or ("",)),
    ]


# --------------------------------------------------------------------------
# Client
# --------------------------------------------------------------------------


@dataclass
class ClientConfig:
    endpoint_url: str
    model_name: str
    auth_token_env_var_name: str = "PLANCENTRIC_API_KEY"
    timeout_ms: int = 60_000
    max_retries: int = 3
    backoff_base_ms: int = 500
    temperature: float = 0.0
    max_tokens: int = 1024
    max_in_flight: int = 4

    def __post_init__(self) -> None:
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ClientConfig":
        if any("token" == k or k.endswith("_token") or k == "api_key" for k in data):
            raise ValueError("tokens are read from the environment, not from config")
        return cls(**data)

    @classmethod
    def from_file(cls, path: str | Path) -> "ClientConfig":
        data = json.loads(Path(path).read_text())
        return cls.from_dict(data.get("client", data))


RETRYABLE_STATUS = {408, 429, 500, 502, 503, 504}


@dataclass
class ChatClient:
    """Blocking chat-completions client with retries and full-jitter backoff.

    ``rng`` drives the jitter; pass a seeded ``random.Random`` for
    reproducible delays. ``transport`` accepts an ``httpx`` transport
    (tests use ``httpx.MockTransport``).
    """

    config: ClientConfig
    rng: random.Random = field(default_factory=lambda: random.Random(0))
    transport: httpx.BaseTransport | None = None
    sleep: Callable[[float], None] = time.sleep
    attempts_made: int = 0

    def __post_init__(self) -> None:
        self._slots = threading.BoundedSemaphore(max(1, self.config.max_in_flight))
        self._lock = threading.Lock()

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        token = os.environ.get(self.config.auth_token_env_var_name)
        if token:
            headers["Authorization"] = f"Bearer {token}"
        return headers

    def build_request(self, messages: Sequence[ChatMessage], temperature: float | None = None,
                      max_tokens: int | None = None) -> dict[str, Any]:
        return {
            "model": self.config.model_name,
            "messages": [m.to_wire() for m in messages],
            "temperature": self.config.temperature if temperature is None else temperature,
            "max_tokens": self.config.max_tokens if max_tokens is None else max_tokens,
        }

    def backoff_seconds(self, attempt: int) -> float:
        with self._lock:
            return self.rng.uniform(0, self.config.backoff_base_ms * 2**attempt) / 1000.0

    def chat(self, messages: Sequence[ChatMessage], temperature: float | None = None,
             max_tokens: int | None = None) -> str:
        payload = self.build_request(messages, temperature, max_tokens)
        timeout = self.config.timeout_ms / 1000.0
        last_status: int | None = None
        last_err = ""
        with self._slots, httpx.Client(transport=self.transport, timeout=timeout) as http:
            for attempt in range(self.config.max_retries + 1):
                if attempt:
                    self.sleep(self.backoff_seconds(attempt - 1))
                with self._lock:
                    self.attempts_made += 1
                try:
                    resp = http.post(self.config.endpoint_url, json=payload, headers=self._headers())
                except httpx.TransportError as exc:
                    last_status, last_err = None, type(exc).__name__
                    logger.warning("chat attempt %d failed: %s", attempt + 1, last_err)
                    continue
                if resp.status_code in RETRYABLE_STATUS:
                    last_status, last_err = resp.status_code, f"HTTP {resp.status_code}"
                    logger.warning("chat attempt %d got HTTP %d", attempt + 1, resp.status_code)
                    continue
                if resp.status_code >= 400:
                    raise ChatTransportError(f"HTTP {resp.status_code}", resp.status_code, attempt + 1)
                return parse_completion(resp.content)
        raise ChatTransportError(
            f"giving up after {self.config.max_retries + 1} attempts ({last_err})",
            last_status, self.config.max_retries + 1,
        )


def parse_completion(body: bytes | str) -> str:
    try:
        data = json.loads(body)
        content = data["choices"][0]["message"]["content"]
    except (ValueError, KeyError, IndexError, TypeError) as exc:
        raise ChatProtocolError(f"malformed completion body: {exc}") from None
    if isinstance(content, list):  # some servers echo structured content
        content = "".join(c.get("text", "") for c in content if isinstance(c, Mapping))
    if not isinstance(content, str):
        raise ChatProtocolError("completion content is not text")
    return content


def chat(config: ClientConfig, messages: Sequence[ChatMessage],
         sampling: Mapping[str, Any] | None = None, **client_kwargs: Any) -> str:
    sampling = sampling or {}
    return ChatClient(config, **client_kwargs).chat(
        messages, sampling.get("temperature"), sampling.get("max_tokens")
    )


class RemotePort:
    """Adapter letting a chat client serve as Planner, Actor, gate, judge or summarizer.

    Requests expose a lazily rendered ``messages`` attribute; the port sends
    those and returns the completion text.
    """

    def __init__(self, client: ChatClient, temperature: float | None = None):
        self.client = client
        self.temperature = temperature

    def respond(self, request: Any) -> str:
        return self.client.chat(request.messages, temperature=self.temperature)
