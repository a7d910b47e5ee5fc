"""Self-contained test bed: mock tool servers over real HTTP plus
deterministic chat backends.

Nothing here talks to the outside world. The mock fleet speaks the same
JSON-RPC dialect the client expects (handshake, session header, paginated
tool listings, text-block call results, optional event-stream framing), and
the chat backends come in two flavors: scripted (exact fingerprint match,
loud on a miss) and demo (rule-driven responders that can carry a whole
pipeline run end to end with reproducible output).
"""
from __future__ import annotations

import hashlib
import itertools
import json
import re
import threading
import time
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Any, Callable

from .gateway import BackendProfile, ChatMessage, ModelTurn, SamplingParams, ToolCall
from .mcp_client import PROTOCOL_VERSION, ToolResult, UnknownToolError
from .prompt_library import get_template
from .registry import PREDEFINED_CATEGORIES

BEHAVIORS = ("echo", "fixed", "error", "delay")


@dataclass
class MockTool:
    name: str
    description: str = ""
    input_schema: dict[str, Any] = field(
        default_factory=lambda: {"type": "object", "properties": {}}
    )
    behavior: str = "echo"
    fixed_result: str = "ok"
    delay: float = 0.0

    def __post_init__(self) -> None:
        if self.behavior not in BEHAVIORS:
            raise ValueError(f"unknown tool behavior: {self.behavior!r}")

    def descriptor(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "description": self.description,
            "inputSchema": self.input_schema,
        }

    def invoke(self, arguments: dict[str, Any]) -> tuple[str, bool]:
        """Returns (text, is_error)."""
        if self.behavior == "error":
            return self.fixed_result or f"{self.name} failed", True
        if self.behavior == "fixed":
            return self.fixed_result, False
        if self.behavior == "delay":
            time.sleep(self.delay)
        if len(arguments) == 1:
            payload = str(next(iter(arguments.values())))
        else:
            payload = json.dumps(arguments, ensure_ascii=False, sort_keys=True)
        return f"{self.name}: {payload}", False


@dataclass
class MockServer:
    """One mock tool server: its registry-facing record and live behavior."""

    key: str  # path segment, doubles as the qualified name
    description: str
    tools: list[MockTool]
    display_name: str = ""
    page_size: int | None = None  # None: single page listings
    sse: bool = False  # stream responses as event frames
    usage_count: int = 100
    transport: str = "streamable-http"
    config_requirements: list[dict[str, Any]] = field(default_factory=list)

    def tool(self, name: str) -> MockTool | None:
        for t in self.tools:
            if t.name == name:
                return t
        return None

    def spec_record(self, endpoint_url: str = "") -> dict[str, Any]:
        # camelCase on purpose: exercises the registry's other spelling
        return {
            "qualifiedName": self.key,
            "displayName": self.display_name or self.key,
            "description": self.description,
            "transport": self.transport,
            "endpointUrl": endpoint_url,
            "usageCount": self.usage_count,
            "configRequirements": list(self.config_requirements),
            "tools": [t.descriptor() for t in self.tools],
        }


# ---------------------------------------------------------------------------
# HTTP fleet.
# ---------------------------------------------------------------------------

_PATH_RE = re.compile(r"^/(?P<key>[^/]+)/mcp$")


class _FleetServer(ThreadingHTTPServer):
    daemon_threads = True
    fleet: dict[str, MockServer]
    sessions: dict[str, str]  # session id -> server key
    session_counter: "itertools.count[int]"
    lock: threading.Lock


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"

    def log_message(self, *args: Any) -> None:  # keep test output quiet
        pass

    def _send(self, status: int, body: bytes, content_type: str,
              extra: dict[str, str] | None = None) -> None:
        self.send_response(status)
        self.send_header("Content-Type", content_type)
        self.send_header("Content-Length", str(len(body)))
        for name, value in (extra or {}).items():
            self.send_header(name, value)
        self.end_headers()
        self.wfile.write(body)

    def _send_json(self, payload: dict[str, Any],
                   extra: dict[str, str] | None = None) -> None:
        self._send(200, json.dumps(payload).encode("utf-8"), "application/json", extra)

    def _send_sse(self, payload: dict[str, Any]) -> None:
        # one noise frame first; the client must match responses by id
        noise = json.dumps(
            {"jsonrpc": "2.0", "method": "notifications/message",
             "params": {"level": "info", "data": "working"}}
        )
        body = (
            ": keepalive\n\n"
            f"data: {noise}\n\n"
            f"data: {json.dumps(payload)}\n\n"
        ).encode("utf-8")
        self._send(200, body, "text/event-stream")

    def _rpc_error(self, req_id: Any, code: int, message: str) -> dict[str, Any]:
        return {"jsonrpc": "2.0", "id": req_id, "error": {"code": code, "message": message}}

    def do_POST(self) -> None:  # noqa: N802 (http.server API)
        server: _FleetServer = self.server  # type: ignore[assignment]
        match = _PATH_RE.match(self.path)
        if not match or match.group("key") not in server.fleet:
            self._send(404, b"not found", "text/plain")
            return
        mock = server.fleet[match.group("key")]
        length = int(self.headers.get("Content-Length") or 0)
        try:
            req = json.loads(self.rfile.read(length).decode("utf-8"))
        except ValueError:
            self._send(400, b"bad json", "text/plain")
            return

        method = req.get("method", "")
        req_id = req.get("id")
        if req_id is None:  # notification: acknowledge, no body
            self._send(202, b"", "text/plain")
            return

        if method == "initialize":
            with server.lock:
                session_id = f"{mock.key}-s{next(server.session_counter)}"
                server.sessions[session_id] = mock.key
            result = {
                "protocolVersion": PROTOCOL_VERSION,
                "capabilities": {"tools": {}},
                "serverInfo": {"name": mock.key, "version": "0.0.1"},
            }
            self._respond(mock, {"jsonrpc": "2.0", "id": req_id, "result": result},
                          {"mcp-session-id": session_id})
            return

        session_id = self.headers.get("mcp-session-id", "")
        if server.sessions.get(session_id) != mock.key:
            self._respond(mock, self._rpc_error(req_id, -32000, "missing or unknown session"))
            return

        if method == "tools/list":
            self._respond(mock, self._list_payload(mock, req))
        elif method == "tools/call":
            self._respond(mock, self._call_payload(mock, req))
        else:
            self._respond(mock, self._rpc_error(req_id, -32601, f"method not found: {method}"))

    def _respond(self, mock: MockServer, payload: dict[str, Any],
                 extra: dict[str, str] | None = None) -> None:
        if mock.sse and extra is None:
            self._send_sse(payload)
        else:
            self._send_json(payload, extra)

    def _list_payload(self, mock: MockServer, req: dict[str, Any]) -> dict[str, Any]:
        descriptors = [t.descriptor() for t in mock.tools]
        if mock.page_size is None:
            result: dict[str, Any] = {"tools": descriptors}
        else:
            cursor = (req.get("params") or {}).get("cursor")
            try:
                offset = int(cursor) if cursor is not None else 0
            except ValueError:
                return self._rpc_error(req["id"], -32602, f"bad cursor: {cursor!r}")
            page = descriptors[offset : offset + mock.page_size]
            result = {"tools": page}
            if offset + mock.page_size < len(descriptors):
                result["nextCursor"] = str(offset + mock.page_size)
        return {"jsonrpc": "2.0", "id": req["id"], "result": result}

    def _call_payload(self, mock: MockServer, req: dict[str, Any]) -> dict[str, Any]:
        params = req.get("params") or {}
        name = params.get("name", "")
        tool = mock.tool(name)
        if tool is None:
            return self._rpc_error(req["id"], -32602, f"Unknown tool: {name}")
        text, is_error = tool.invoke(params.get("arguments") or {})
        result = {"content": [{"type": "text", "text": text}], "isError": is_error}
        return {"jsonrpc": "2.0", "id": req["id"], "result": result}


class MockFleet:
    """Serves any number of mock servers from one listener, one path each."""

    def __init__(self, servers: list[MockServer], host: str = "127.0.0.1", port: int = 0):
        if len({s.key for s in servers}) != len(servers):
            raise ValueError("duplicate mock server keys")
        self._httpd = _FleetServer((host, port), _Handler)
        self._httpd.fleet = {s.key: s for s in servers}
        self._httpd.sessions = {}
        self._httpd.session_counter = itertools.count(1)
        self._httpd.lock = threading.Lock()
        self._thread = threading.Thread(target=self._httpd.serve_forever, daemon=True)
        self._thread.start()
        self.servers = list(servers)

    @property
    def base_url(self) -> str:
        host, port = self._httpd.server_address[:2]
        return f"http://{host}:{port}"

    def endpoint(self, key: str) -> str:
        if key not in self._httpd.fleet:
            raise KeyError(key)
        return f"{self.base_url}/{key}/mcp"

    def spec_records(self) -> list[dict[str, Any]]:
        return [s.spec_record(self.endpoint(s.key)) for s in self.servers]

    def close(self) -> None:
        self._httpd.shutdown()
        self._httpd.server_close()
        self._thread.join(timeout=5)

    def __enter__(self) -> "MockFleet":
        return self

    def __exit__(self, *exc: Any) -> None:
        self.close()


@dataclass
class LocalSession:
    """In-process stand-in for a client session; same surface, no sockets."""

    server: MockServer
    session_id: str = "local"
    protocol_version: str = PROTOCOL_VERSION
    state: str = "ready"

    def list_tools(self) -> list[dict[str, Any]]:
        return [t.descriptor() for t in self.server.tools]

    def call_tool(self, name: str, arguments: dict[str, Any]) -> ToolResult:
        if self.state != "ready":
            raise RuntimeError("session is closed")
        tool = self.server.tool(name)
        if tool is None:
            raise UnknownToolError(f"Unknown tool: {name}")
        text, is_error = tool.invoke(arguments)
        raw = {"content": [{"type": "text", "text": text}], "isError": is_error}
        return ToolResult(
            content=[text],
            is_error=is_error,
            raw=json.dumps(raw, ensure_ascii=False, sort_keys=True),
        )

    def close(self) -> None:
        self.state = "closed"


# ---------------------------------------------------------------------------
# Scripted chat backend: exact conversation-state matching.
# ---------------------------------------------------------------------------


class ScriptedMiss(RuntimeError):
    """A conversation state no script covers. Deliberately not a gateway
    error: retries or silent fallbacks would hide a broken fixture."""


def fingerprint(messages: list[ChatMessage]) -> str:
    """Digest of the conversation state a reply decision depends on: the most
    recent user or tool-result content plus how many assistant messages exist."""
    last = ""
    for msg in reversed(messages):
        if msg.role in ("user", "function"):
            last = msg.content
            break
    assistant_count = sum(1 for m in messages if m.role == "assistant")
    key = f"{assistant_count}\x1f{last}"
    return hashlib.sha256(key.encode("utf-8")).hexdigest()[:16]


@dataclass
class ScriptedReply:
    content: str = ""
    tool_calls: list[ToolCall] = field(default_factory=list)

    def turn(self) -> ModelTurn:
        return ModelTurn(
            content=self.content,
            tool_calls=list(self.tool_calls),
            finish_reason="tool_calls" if self.tool_calls else "stop",
            usage={"prompt_tokens": 0, "completion_tokens": max(1, len(self.content) // 4)},
        )


class ScriptedChatBackend:
    def __init__(self, profile: BackendProfile, script: dict[str, ScriptedReply] | None = None):
        self.profile = profile
        self.script = dict(script or {})

    def add(self, messages: list[ChatMessage], reply: ScriptedReply) -> str:
        key = fingerprint(messages)
        self.script[key] = reply
        return key

    def complete(
        self,
        messages: list[ChatMessage],
        tool_schemas: list[dict[str, Any]] | None,
        params: SamplingParams,
    ) -> ModelTurn:
        key = fingerprint(messages)
        reply = self.script.get(key)
        if reply is None:
            tail = messages[-1].content[:120] if messages else ""
            raise ScriptedMiss(
                f"no scripted reply for state {key} (backend {self.profile.id}); "
                f"last message: {tail!r}"
            )
        return reply.turn()


class ScriptBuilder:
    """Builds a script while mirroring exactly how the episode runner appends
    messages, so fingerprints line up with what the backend will see."""

    def __init__(self, backend: ScriptedChatBackend, prefix: list[ChatMessage] | None = None):
        self.backend = backend
        self.messages: list[ChatMessage] = list(prefix or [])

    def user(self, content: str) -> "ScriptBuilder":
        self.messages.append(ChatMessage(role="user", content=content))
        return self

    def reply_text(self, content: str) -> "ScriptBuilder":
        self.backend.add(self.messages, ScriptedReply(content=content))
        self.messages.append(ChatMessage(role="assistant", content=content))
        return self

    def reply_calls(self, calls: list[ToolCall], content: str = "") -> "ScriptBuilder":
        self.backend.add(self.messages, ScriptedReply(content=content, tool_calls=list(calls)))
        if content:
            self.messages.append(ChatMessage(role="assistant", content=content))
        for call in calls:
            self.messages.append(ChatMessage(role="assistant", content="", function_call=call))
        return self

    def tool_result(self, name: str, content: str) -> "ScriptBuilder":
        self.messages.append(ChatMessage(role="function", content=content, name=name))
        return self


def dump_script(path: str | Path, script: dict[str, ScriptedReply]) -> None:
    doc = {
        key: {
            "content": reply.content,
            "tool_calls": [
                {"name": c.name, "arguments": c.arguments} for c in reply.tool_calls
            ],
        }
        for key, reply in sorted(script.items())
    }
    Path(path).write_text(json.dumps(doc, ensure_ascii=False, indent=2), encoding="utf-8")


def load_script(path: str | Path) -> dict[str, ScriptedReply]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    script: dict[str, ScriptedReply] = {}
    for key, entry in doc.items():
        calls = [
            ToolCall(name=c["name"], arguments=dict(c.get("arguments") or {}))
            for c in entry.get("tool_calls", [])
        ]
        script[key] = ScriptedReply(content=entry.get("content", ""), tool_calls=calls)
    return script


# ---------------------------------------------------------------------------
# Demo backends: rule-driven responders for full pipeline runs.
#
# They recognize which prompt they were handed by its response skeleton tags,
# pull the variable material out of the rendered text, and answer with
# valid, deterministic output derived from a digest of the prompt. All
# variability is hash-based, so the same prompt always gets the same answer.
# ---------------------------------------------------------------------------


def _digest(text: str) -> int:
    return int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "big")


def _novel_lines(rendered: str, template_id: str) -> list[str]:
    """Lines present in the rendered prompt but not in the template body:
    exactly the slot-derived material, without assuming anything about the
    template's own wording."""
    static = set(get_template(template_id).body.splitlines())
    return [ln for ln in rendered.splitlines() if ln.strip() and ln not in static]


def _detect_template(rendered: str, candidates: tuple[str, ...]) -> str:
    """Pick the candidate whose static lines are most fully present in the
    rendered text. Rendering replaces slot lines but keeps every other line
    verbatim, so the true template loses almost nothing."""
    rendered_lines = set(rendered.splitlines())
    best, best_missing = candidates[0], None
    for candidate in candidates:
        static = [ln for ln in get_template(candidate).body.splitlines() if ln.strip()]
        missing = sum(1 for ln in static if ln not in rendered_lines)
        if best_missing is None or missing < best_missing:
            best, best_missing = candidate, missing
    return best


def _k_from_prompt(rendered: str, template_id: str, default: int) -> int:
    static_nums = set(re.findall(r"\d+", get_template(template_id).body))
    novel = [n for n in re.findall(r"\d+", rendered) if n not in static_nums]
    for n in novel:
        if 1 <= int(n) <= 16:
            return int(n)
    return default

_TOOL_LINE = re.compile(r"^- ([A-Za-z0-9_.\-]+): (.*)$")
_SERVER_HEAD = re.compile(r"^### (.+) \(qualified name: (.+)\)$")
_NAME_LIST = re.compile(r"^[A-Za-z0-9_.\-]+(?:, [A-Za-z0-9_.\-]+)*$")


def _tool_names(lines: list[str]) -> list[str]:
    return [m.group(1) for ln in lines if (m := _TOOL_LINE.match(ln))]


def _server_blocks(lines: list[str]) -> list[tuple[str, list[str]]]:
    """(qualified_name, tool names) per described server, in order."""
    blocks: list[tuple[str, list[str]]] = []
    for ln in lines:
        head = _SERVER_HEAD.match(ln)
        if head:
            blocks.append((head.group(2), []))
        elif blocks and (m := _TOOL_LINE.match(ln)):
            blocks[-1][1].append(m.group(1))
    return blocks


def _name_list_line(lines: list[str]) -> list[str]:
    """First slot-derived line that is a bare comma-joined name list."""
    for ln in lines:
        if not ln.startswith(("-", "#")) and _NAME_LIST.match(ln.strip()):
            return [t.strip() for t in ln.strip().split(",")]
    return []


_QUESTION_SHAPES = (
    "I'm preparing a status update for ticket {n} and need the latest workspace"
    " details pulled together. Can you gather what's relevant and summarize it for me?",
    "Before tomorrow's review I want the current state of item {n} checked. Please"
    " look it over and tell me whether anything needs my attention.",
    "A colleague flagged entry {n} this morning. Could you investigate and give me"
    " a short rundown of what you find?",
    "I keep losing track of record {n}. Please fetch whatever we have on it and"
    " draft a brief recap I can share with the team.",
)


def _demo_question(digest: int) -> str:
    shape = _QUESTION_SHAPES[digest % len(_QUESTION_SHAPES)]
    return shape.format(n=digest % 9000 + 1000)


def _prompt_text(messages: list[ChatMessage]) -> str:
    return "\n".join(m.content for m in messages if m.role == "user")


def _turn(content: str, prompt: str) -> ModelTurn:
    return ModelTurn(
        content=content,
        finish_reason="stop",
        usage={
            "prompt_tokens": max(1, len(prompt) // 4),
            "completion_tokens": max(1, len(content) // 4),
        },
    )


class DemoTaskGenerator:
    """Deterministic stand-in for the task-generation model.

    Assumes fixture tool names are identifier-like (no plain English words),
    so its canned question text never collides with a target name. Repeated
    identical prompts get fresh answers via an occurrence counter, the way a
    sampling model at nonzero temperature would; the call sequence as a whole
    stays reproducible.
    """

    def __init__(self, profile: BackendProfile, category_palette: int = 3):
        self.profile = profile
        # small palette so same-category sampling has pairs to find
        self.palette = PREDEFINED_CATEGORIES[:category_palette]
        self._seen: dict[str, int] = {}

    def complete(
        self,
        messages: list[ChatMessage],
        tool_schemas: list[dict[str, Any]] | None,
        params: SamplingParams,
    ) -> ModelTurn:
        prompt = _prompt_text(messages)
        occurrence = self._seen.get(prompt, 0)
        self._seen[prompt] = occurrence + 1
        d = _digest(f"{occurrence}\x1f{prompt}")
        if "<primary_label>" in prompt:
            return _turn(self._category(prompt, d), prompt)
        if "<variations>" in prompt:
            return _turn(self._variations(prompt, d), prompt)
        if "<sub_questions>" in prompt:
            return _turn(self._split(prompt, d), prompt)
        if "<follow_up_question>" in prompt:
            return _turn(
                "<response><follow_up_question>Thanks. One more thing: could you"
                f" double-check item {d % 90 + 10} from that result and flag anything"
                " inconsistent?</follow_up_question></response>",
                prompt,
            )
        if "<cross_server_workflow>" in prompt:
            return _turn(self._cross(prompt, d), prompt)
        if "<target_tools>" in prompt:
            return _turn(self._single_multi(prompt, d), prompt)
        if "<target_tool>" in prompt:
            return _turn(self._single_one(prompt, d), prompt)
        raise ScriptedMiss(f"demo task generator got an unrecognized prompt: {prompt[:120]!r}")

    def _category(self, prompt: str, d: int) -> str:
        label = self.palette[d % len(self.palette)]
        return (
            "<response><analysis>Labeled from the advertised tool surface."
            f"</analysis><primary_label>{label}</primary_label></response>"
        )

    def _single_one(self, prompt: str, d: int) -> str:
        tools = _tool_names(_novel_lines(prompt, "task_single_one_tool"))
        if not tools:
            raise ScriptedMiss("demo task generator found no tool lines in the prompt")
        pick = tools[d % len(tools)]
        return (
            "<response><server_analysis>One capability fits this scenario."
            f"</server_analysis><target_tool>{pick}</target_tool>"
            f"<question>{_demo_question(d)}</question></response>"
        )

    def _single_multi(self, prompt: str, d: int) -> str:
        lines = _novel_lines(prompt, "task_single_multi_tool")
        tools = _tool_names(lines)
        k = min(_k_from_prompt(prompt, "task_single_multi_tool", 2), len(tools))
        start = d % len(tools)
        picks = [tools[(start + i) % len(tools)] for i in range(k)]
        entries = "".join(f"<tool>{name}</tool>" for name in picks)
        return (
            "<response><server_analysis>These capabilities chain naturally."
            f"</server_analysis><target_tools>{entries}</target_tools>"
            f"<question>{_demo_question(d)}</question></response>"
        )

    def _cross(self, prompt: str, d: int) -> str:
        # featured and multi-server prompts share one response shape
        template_id = _detect_template(prompt, ("task_multi_server", "task_featured"))
        blocks = _server_blocks(_novel_lines(prompt, template_id))
        if not blocks:
            raise ScriptedMiss("demo task generator found no server blocks in the prompt")
        k = _k_from_prompt(prompt, template_id, 2)
        entries = []
        for i in range(k):
            server, names = blocks[(d + i) % len(blocks)]
            if not names:
                raise ScriptedMiss(f"demo task generator saw no tools under {server!r}")
            # advance the tool index on each wrap so repeat visits to a
            # server pick a different tool when it has one
            entries.append((server, names[((d >> 3) + i // len(blocks)) % len(names)]))
        body = "".join(f'<tool server="{srv}">{name}</tool>' for srv, name in entries)
        return (
            "<response><server_analysis>Each server contributes one step."
            "</server_analysis><cross_server_workflow>Results flow from one"
            " capability into the next.</cross_server_workflow>"
            f"<target_tools>{body}</target_tools>"
            f"<question>{_demo_question(d)}</question></response>"
        )

    def _variations(self, prompt: str, d: int) -> str:
        mode_tag = "constraints" if "<constraints>" in prompt else "context"
        template_id = "diversify_constraint" if mode_tag == "constraints" else "diversify_persona"
        count = _k_from_prompt(prompt, template_id, 3)
        parts = []
        for i in range(1, count + 1):
            parts.append(
                f"<variation_{i}><{mode_tag}>Angle {i}: a different requester with"
                f" the same underlying need.</{mode_tag}>"
                f"<question>{_demo_question(d + i)}</question></variation_{i}>"
            )
        return "<response><variations>" + "".join(parts) + "</variations></response>"

    def _split(self, prompt: str, d: int) -> str:
        lines = _novel_lines(prompt, "multiturn_split")
        targets = _name_list_line(lines)
        if len(targets) < 2:
            raise ScriptedMiss("demo task generator could not locate the target list")
        steps = []
        for i, name in enumerate(targets, start=1):
            steps.append(
                f"<sub_question_{i}><question>Step {i}: now take care of part {i} of"
                f" my request (ref {d % 900 + 100}).</question>"
                f"<tools>{name}</tools></sub_question_{i}>"
            )
        return (
            "<response><plan>One step per required capability, in order.</plan>"
            "<sub_questions>" + "".join(steps) + "</sub_questions></response>"
        )


class DemoJudge:
    """Deterministic grader: scores derive from a digest of the prompt, high
    enough to keep most items and varied enough to exercise every filter."""

    def __init__(self, profile: BackendProfile):
        self.profile = profile

    def complete(
        self,
        messages: list[ChatMessage],
        tool_schemas: list[dict[str, Any]] | None,
        params: SamplingParams,
    ) -> ModelTurn:
        from .judge import RESPONSE_DIMENSIONS, TASK_DIMENSIONS, score_to_word

        prompt = _prompt_text(messages)
        d = _digest(prompt)
        if "<completeness>" in prompt:
            dims = RESPONSE_DIMENSIONS
        elif "<question_quality>" in prompt:
            dims = TASK_DIMENSIONS
        else:
            raise ScriptedMiss(f"demo judge got an unrecognized prompt: {prompt[:120]!r}")
        blocks = []
        for i, dim in enumerate(dims):
            score = 3 + min(2, (d >> (2 * i)) & 0b11)  # 3..5, biased high
            if dim == "question_quality" and d % 11 == 0:
                score = 2  # occasional rejection keeps the task filter honest
            if dim == "scenario_realism" and d % 13 == 0:
                score = 2
            word = score_to_word(dim, score)
            blocks.append(
                f"<{dim}><reasoning>Scored by fixed rule.</reasoning>"
                f"<rating>{word}</rating></{dim}>"
            )
        return _turn("<response>" + "".join(blocks) + "</response>", prompt)


class DemoTrajectory:
    """Deterministic stand-in for the trajectory model.

    Answer-or-call is a coin flip on the conversation digest (so roughly half
    of all first turns use no tool), calls occasionally arrive two at a time,
    and any turn after tool results produces a closing summary.
    """

    def __init__(self, profile: BackendProfile):
        self.profile = profile

    def complete(
        self,
        messages: list[ChatMessage],
        tool_schemas: list[dict[str, Any]] | None,
        params: SamplingParams,
    ) -> ModelTurn:
        d = _digest(fingerprint(messages))
        names = [
            schema["function"]["name"]
            for schema in tool_schemas or []
            if schema.get("function", {}).get("name")
        ]
        last_role = messages[-1].role if messages else ""
        usage = {
            "prompt_tokens": max(1, sum(len(m.content) for m in messages) // 4),
            "completion_tokens": 24,
        }
        if last_role == "function":
            tail = messages[-1].content[:80]
            return ModelTurn(
                content=f"All set. Based on the latest result: {tail}",
                finish_reason="stop",
                usage=usage,
            )
        if not names or d % 2 == 0:
            return ModelTurn(
                content=(
                    "Nothing I have access to applies here, so here is my best"
                    " direct answer: please review the request manually."
                ),
                finish_reason="stop",
                usage=usage,
            )
        picks = [names[d % len(names)]]
        if d % 5 == 0 and len(names) >= 2:
            second = names[(d // 5) % len(names)]
            if second != picks[0]:
                picks.append(second)
        calls = [
            ToolCall(name=name, arguments={"query": f"item {d % 90 + 10}"})
            for name in picks
        ]
        return ModelTurn(content="", tool_calls=calls, finish_reason="tool_calls", usage=usage)


DEMO_BACKENDS: dict[str, Callable[[BackendProfile], Any]] = {
    "demo-generator": DemoTaskGenerator,
    "demo-judge": DemoJudge,
    "demo-trajectory": DemoTrajectory,
}
