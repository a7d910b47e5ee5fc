"""Chat-model access layer.

Everything that talks to a language model goes through here: the chat message
and turn types shared across the pipeline, prompt template rendering, tolerant
extraction of XML-tagged model output, per-backend rate limiting, and an
OpenAI-compatible HTTP backend.
"""
from __future__ import annotations

import json
import re
import threading
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable

import httpx

ROLES = ("system", "user", "assistant", "function")


class GatewayError(RuntimeError):
    pass


class TransportError(GatewayError):
    pass


class ResponseFormatError(GatewayError):
    pass


class PromptError(ValueError):
    pass


class TagParseError(ValueError):
    pass


@dataclass
class ToolCall:
    """A tool invocation requested by the model.

    Arguments that fail structured parsing are kept verbatim in raw_arguments
    and flagged, never discarded.
    """

    name: str
    arguments: dict[str, Any] = field(default_factory=dict)
    raw_arguments: str | None = None
    parse_error: bool = False


@dataclass
class ChatMessage:
    role: str
    content: str = ""
    function_call: ToolCall | None = None
    name: str | None = None

    def __post_init__(self) -> None:
        if self.role not in ROLES:
            raise ValueError(f"unknown chat role: {self.role!r}")
        if self.function_call is not None and self.role != "assistant":
            raise ValueError("function_call is only valid on assistant messages")


@dataclass
class ModelTurn:
    """One normalized model response: text, requested tool calls, finish state."""

    content: str = ""
    tool_calls: list[ToolCall] = field(default_factory=list)
    finish_reason: str = "stop"
    usage: dict[str, int] = field(default_factory=dict)


@dataclass(frozen=True)
class SamplingParams:
    temperature: float = 0.0
    top_p: float = 1.0
    max_tokens: int = 2048


@dataclass
class BackendProfile:
    """Identity and defaults for one model endpoint."""

    id: str
    model: str
    role: str = "task_generator"  # task_generator | judge | trajectory
    endpoint: str = ""
    params: SamplingParams = field(default_factory=SamplingParams)
    rate_limit: float | None = None
    api_key_env: str | None = None


@dataclass(frozen=True)
class PromptTemplate:
    id: str
    body: str
    required_slots: tuple[str, ...]


_SLOT_RE = re.compile(r"\{([A-Z][A-Z0-9_]*)\}")


def template_slots(body: str) -> tuple[str, ...]:
    """All-caps {SLOT} placeholders in order of first appearance."""
    seen: list[str] = []
    for m in _SLOT_RE.finditer(body):
        if m.group(1) not in seen:
            seen.append(m.group(1))
    return tuple(seen)


def render_prompt(template: PromptTemplate | str, bindings: dict[str, str]) -> str:
    """Substitute every {SLOT} in the template body.

    Raises PromptError naming all unbound slots at once rather than the first.
    """
    body = template.body if isinstance(template, PromptTemplate) else template
    slots = template_slots(body)
    missing = [s for s in slots if s not in bindings]
    if missing:
        raise PromptError(f"unbound template slots: {', '.join(missing)}")

    def repl(m: re.Match[str]) -> str:
        return str(bindings[m.group(1)])

    return _SLOT_RE.sub(repl, body)


# ---------------------------------------------------------------------------
# Tagged-output extraction.
#
# Model output is messy: fenced in markdown, echoing skeleton comments, mixing
# prose around the XML. Parsing is tolerant of all of that but never invents
# content for a missing required tag.
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TagSpec:
    """One expected tag. A trailing ``*`` in the name (``variation_*``) matches
    a numbered family and returns entries ordered by their number."""

    name: str
    required: bool = True
    repeated: bool = False


_FENCE_RE = re.compile(r"^```[^\n]*$", re.M)
_COMMENT_RE = re.compile(r"<!--.*?-->", re.S)


def _preprocess(text: str) -> str:
    text = _FENCE_RE.sub("", text)
    return _COMMENT_RE.sub("", text)


def _find_tag(text: str, tag: str) -> list[tuple[dict[str, str], str]]:
    pattern = re.compile(
        rf"<\s*{re.escape(tag)}((?:\s[^<>]*?)?)\s*>(.*?)</\s*{re.escape(tag)}\s*>",
        re.I | re.S,
    )
    out = []
    for m in pattern.finditer(text):
        attrs = dict(re.findall(r"([\w-]+)\s*=\s*[\"']([^\"']*)[\"']", m.group(1)))
        out.append((attrs, m.group(2).strip()))
    return out


def _scope(text: str) -> str:
    hits = _find_tag(text, "response")
    if hits:
        # take the last response block; retried model output appends
        return hits[-1][1]
    return text


def extract_tagged(
    response_text: str, tag_schema: Iterable[TagSpec | tuple]
) -> dict[str, list[str]]:
    """Pull tag contents out of model output.

    Returns {tag_name: [content, ...]}. Non-repeated tags keep the last
    non-empty occurrence. Missing or empty required tags raise TagParseError.
    """
    text = _scope(_preprocess(response_text))
    result: dict[str, list[str]] = {}
    for spec in tag_schema:
        if not isinstance(spec, TagSpec):
            spec = TagSpec(*spec)
        if spec.name.endswith("_*"):
            stem = spec.name[:-2]
            family = re.findall(
                rf"<\s*({re.escape(stem)}_(\d+))(?:\s[^<>]*?)?\s*>",
                text,
                re.I,
            )
            entries = []
            for full, num in sorted(set(family), key=lambda t: int(t[1])):
                hits = _find_tag(text, full)
                entries.extend(content for _, content in hits)
            if spec.required and not entries:
                raise TagParseError(f"required tag family absent: <{spec.name}>")
            result[spec.name] = entries
            continue
        hits = _find_tag(text, spec.name)
        contents = [content for _, content in hits]
        if spec.repeated:
            picked = [c for c in contents if c]
        else:
            non_empty = [c for c in contents if c]
            picked = [non_empty[-1]] if non_empty else []
        if spec.required and not picked:
            if re.search(rf"<\s*{re.escape(spec.name)}[\s>]", text, re.I) and not hits:
                raise TagParseError(f"unbalanced tag: <{spec.name}>")
            raise TagParseError(f"required tag absent or empty: <{spec.name}>")
        result[spec.name] = picked
    return result


def extract_attributed(response_text: str, tag: str) -> list[tuple[dict[str, str], str]]:
    """All occurrences of an attribute-bearing tag, in document order.

    Used for entries like <tool server="...">name</tool>.
    """
    text = _scope(_preprocess(response_text))
    return _find_tag(text, tag)


# ---------------------------------------------------------------------------
# Rate limiting and the chat entry point.
# ---------------------------------------------------------------------------

class RateLimiter:
    """Spaces requests so no 1-second window ever exceeds ceil(rate) sends.

    Clock and sleeper are injectable so tests run without real waiting.
    """

    def __init__(
        self,
        rate_per_sec: float | None,
        clock: Callable[[], float] = time.monotonic,
        sleeper: Callable[[float], None] = time.sleep,
    ) -> None:
        assert rate_per_sec is None or rate_per_sec > 0
        self._interval = 0.0 if not rate_per_sec else 1.0 / rate_per_sec
        self._clock = clock
        self._sleep = sleeper
        self._lock = threading.Lock()
        self._next_free = 0.0
        self.trace: list[float] = []

    def acquire(self) -> float:
        with self._lock:
            now = self._clock()
            slot = max(now, self._next_free)
            self._next_free = slot + self._interval
            self.trace.append(slot)
        if slot > now:
            self._sleep(slot - now)
        return slot


@dataclass
class UsageLog:
    requests: int = 0
    prompt_tokens: int = 0
    completion_tokens: int = 0

    def record(self, usage: dict[str, int]) -> None:
        self.requests += 1
        self.prompt_tokens += int(usage.get("prompt_tokens", 0))
        self.completion_tokens += int(usage.get("completion_tokens", 0))

    def as_dict(self) -> dict[str, int]:
        return {
            "requests": self.requests,
            "prompt_tokens": self.prompt_tokens,
            "completion_tokens": self.completion_tokens,
        }


def wire_messages(messages: list[ChatMessage]) -> list[dict[str, Any]]:
    """Convert internal messages to OpenAI-compatible wire form.

    Tool-call ids are assigned in order; each function message consumes the
    oldest pending call so request/response pairing survives the conversion.
    """
    out: list[dict[str, Any]] = []
    pending: list[tuple[str, str]] = []  # (call id, tool name)
    counter = 0
    for msg in messages:
        if msg.role == "assistant" and msg.function_call is not None:
            call = msg.function_call
            call_id = f"call_{counter:04d}"
            counter += 1
            pending.append((call_id, call.name))
            args = call.raw_arguments
            if args is None:
                args = json.dumps(call.arguments, ensure_ascii=False)
            entry: dict[str, Any] = {
                "role": "assistant",
                "content": msg.content or None,
                "tool_calls": [
                    {
                        "id": call_id,
                        "type": "function",
                        "function": {"name": call.name, "arguments": args},
                    }
                ],
            }
            out.append(entry)
        elif msg.role == "function":
            call_id, name = pending.pop(0) if pending else ("call_none", msg.name or "")
            out.append(
                {
                    "role": "tool",
                    "tool_call_id": call_id,
                    "name": msg.name or name,
                    "content": msg.content,
                }
            )
        else:
            out.append({"role": msg.role, "content": msg.content})
    return out


def parse_tool_call(name: str, arguments: Any) -> ToolCall:
    """Normalize one wire tool call; unparsable argument text is retained."""
    if isinstance(arguments, dict):
        return ToolCall(name=name, arguments=arguments)
    raw = "" if arguments is None else str(arguments)
    try:
        parsed = json.loads(raw) if raw.strip() else {}
    except ValueError:
        return ToolCall(name=name, arguments={}, raw_arguments=raw, parse_error=True)
    if not isinstance(parsed, dict):
        return ToolCall(name=name, arguments={}, raw_arguments=raw, parse_error=True)
    return ToolCall(name=name, arguments=parsed, raw_arguments=raw)


class HttpChatBackend:
    """OpenAI-compatible chat completions over HTTP."""

    def __init__(
        self,
        profile: BackendProfile,
        api_key: str | None = None,
        timeout: float = 120.0,
        client: httpx.Client | None = None,
    ) -> None:
        assert profile.endpoint, "HTTP backend requires an endpoint"
        self.profile = profile
        self._headers = {"Content-Type": "application/json"}
        if api_key:
            self._headers["Authorization"] = f"Bearer {api_key}"
        self._client = client or httpx.Client(timeout=timeout)

    def complete(
        self,
        messages: list[ChatMessage],
        tool_schemas: list[dict[str, Any]] | None,
        params: SamplingParams,
    ) -> ModelTurn:
        payload: dict[str, Any] = {
            "model": self.profile.model,
            "messages": wire_messages(messages),
            "temperature": params.temperature,
            "top_p": params.top_p,
            "max_tokens": params.max_tokens,
        }
        if tool_schemas:
            payload["tools"] = tool_schemas
        try:
            resp = self._client.post(
                self.profile.endpoint, json=payload, headers=self._headers
            )
        except httpx.HTTPError as exc:
            raise TransportError(f"chat request failed: {exc}") from exc
        if resp.status_code >= 500:
            raise TransportError(f"chat backend returned {resp.status_code}")
        if resp.status_code >= 400:
            raise ResponseFormatError(
                f"chat backend rejected request: {resp.status_code} {resp.text[:200]}"
            )
        try:
            body = resp.json()
            choice = body["choices"][0]
            message = choice["message"]
        except (ValueError, KeyError, IndexError) as exc:
            raise ResponseFormatError(f"malformed chat response: {exc}") from exc
        calls = [
            parse_tool_call(
                tc.get("function", {}).get("name", ""),
                tc.get("function", {}).get("arguments"),
            )
            for tc in message.get("tool_calls") or []
        ]
        finish = choice.get("finish_reason") or "stop"
        if calls:
            finish = "tool_calls"
        return ModelTurn(
            content=message.get("content") or "",
            tool_calls=calls,
            finish_reason=finish,
            usage=body.get("usage") or {},
        )


class Gateway:
    """Applies rate limits, retries, and usage accounting around backends."""

    def __init__(self, retries: int = 2) -> None:
        self.retries = retries
        self._limiters: dict[str, RateLimiter] = {}
        self._usage: dict[str, UsageLog] = {}

    def limiter_for(self, profile: BackendProfile) -> RateLimiter:
        if profile.id not in self._limiters:
            self._limiters[profile.id] = RateLimiter(profile.rate_limit)
        return self._limiters[profile.id]

    def usage_for(self, backend_id: str) -> UsageLog:
        return self._usage.setdefault(backend_id, UsageLog())

    def chat(
        self,
        backend: Any,
        messages: list[ChatMessage],
        tool_schemas: list[dict[str, Any]] | None = None,
        params: SamplingParams | None = None,
    ) -> ModelTurn:
        profile: BackendProfile = backend.profile
        effective = params or profile.params
        last_exc: Exception | None = None
        for attempt in range(self.retries + 1):
            self.limiter_for(profile).acquire()
            try:
                turn = backend.complete(messages, tool_schemas, effective)
            except TransportError as exc:
                last_exc = exc
                continue
            self.usage_for(profile.id).record(turn.usage)
            return turn
        raise TransportError(
            f"backend {profile.id} unreachable after {self.retries + 1} attempts: {last_exc}"
        )

    def usage_report(self) -> dict[str, dict[str, int]]:
        return {bid: log.as_dict() for bid, log in sorted(self._usage.items())}
