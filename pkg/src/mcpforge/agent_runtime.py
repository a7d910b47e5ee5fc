"""Agent execution loop.

Runs one tool-using conversation against live MCP sessions: the model sees
the bound tools, requests calls, results come back as function messages, and
the loop ends when the model answers in plain text or a budget runs out.

Message layout contract: one system message, then for each round a user
message followed by assistant messages (one per requested tool call, plus an
optional leading content-only message) and exactly one function message per
executed call in request order, closed by a final content-only assistant
message. check_message_grammar enforces exactly that shape.
"""
from __future__ import annotations

import json
import re
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Mapping

from .config import PolicyConfig
from .gateway import ChatMessage, GatewayError, ToolCall
from .mcp_client import McpProtocolError, McpTimeout, McpTransportError
from .registry import ToolSpec

OUTCOMES = ("completed", "failed_start", "connect_error", "turn_limit", "backend_error")


@dataclass(frozen=True)
class BoundTool:
    """A tool attached to the server session that executes it."""

    server: str
    tool: ToolSpec

    @property
    def qualified(self) -> str:
        return f"{self.server}-{self.tool.name}"


@dataclass
class Trajectory:
    messages: list[ChatMessage]
    outcome: str
    tool_call_count: int = 0
    assistant_turns: int = 0
    parallel_call_turns: int = 0

    def __post_init__(self) -> None:
        if self.outcome not in OUTCOMES:
            raise ValueError(f"unknown trajectory outcome: {self.outcome!r}")


def bind_tools(specs: list, servers: Mapping[str, Any] | None = None) -> list[BoundTool]:
    """Convenience: bind every tool of every server spec."""
    out: list[BoundTool] = []
    for spec in specs:
        out.extend(BoundTool(server=spec.qualified_name, tool=t) for t in spec.tools)
    return out


def build_system_prompt(tools: list[BoundTool]) -> str:
    """Deterministic system prompt enumerating every bound tool once, with
    its server-qualified name, description, and parameter schema."""
    lines = [
        "You are a helpful assistant with access to the tools listed below.",
        "Call a tool whenever it helps you complete the user's request, use",
        "only tools from this list, and finish with a plain-text answer.",
        "",
        "## Tools",
    ]
    for binding in tools:
        schema = binding.tool.input_schema or {"type": "object", "properties": {}}
        lines.append("")
        lines.append(f"### {binding.qualified}")
        if binding.tool.description:
            lines.append(binding.tool.description)
        lines.append(
            "Parameters: " + json.dumps(schema, ensure_ascii=False, sort_keys=True)
        )
    return "\n".join(lines)


def tool_schemas(tools: list[BoundTool]) -> list[dict[str, Any]]:
    return [
        {
            "type": "function",
            "function": {
                "name": b.qualified,
                "description": b.tool.description,
                "parameters": b.tool.input_schema or {"type": "object", "properties": {}},
            },
        }
        for b in tools
    ]


def error_payload(kind: str, message: str) -> str:
    """Standardized error body embedded in function messages so the
    trajectory filter can recognize failures from content alone."""
    return json.dumps(
        {"error": {"type": kind, "message": message}}, ensure_ascii=False, sort_keys=True
    )


def _truncate(text: str, limit: int) -> str:
    encoded = text.encode("utf-8")
    if len(encoded) <= limit:
        return text
    kept = encoded[:limit].decode("utf-8", errors="ignore")
    return f"{kept}\n[truncated {len(encoded) - limit} bytes]"


def resolve_tool_call(
    call: ToolCall,
    bindings: Mapping[str, BoundTool],
    sessions: Mapping[str, Any],
    truncate_bytes: int = 65536,
) -> ChatMessage:
    """Execute one requested call and wrap the outcome as a function message.

    Unknown tools, argument parse failures, timeouts, and error-flagged
    results all become standardized error payloads; the episode continues.
    """
    binding = bindings.get(call.name)
    if binding is None:
        content = error_payload("unknown_tool", f"unknown tool: {call.name}")
        return ChatMessage(role="function", content=content, name=call.name)
    if call.parse_error:
        content = error_payload(
            "bad_arguments", f"arguments were not valid JSON: {call.raw_arguments!r}"
        )
        return ChatMessage(role="function", content=content, name=call.name)
    session = sessions[binding.server]
    try:
        result = session.call_tool(binding.tool.name, call.arguments)
    except McpTimeout as exc:
        content = error_payload("timeout", str(exc))
    except (McpTransportError, McpProtocolError) as exc:
        content = error_payload("tool_error", str(exc))
    else:
        if result.is_error:
            content = error_payload("tool_error", result.text())
        else:
            content = _truncate(result.text(), truncate_bytes)
    return ChatMessage(role="function", content=content, name=call.name)


def run_episode(
    prefix: list[ChatMessage],
    tools: list[BoundTool],
    sessions: Mapping[str, Any],
    gateway: Any,
    backend: Any,
    policy: PolicyConfig | None = None,
) -> Trajectory:
    """Drive the agent loop until a plain-text answer or a budget stops it.

    The prefix must end with a user message; a leading system message is
    reused when present so multi-turn continuations keep their context.
    """
    policy = policy or PolicyConfig()
    if not prefix or prefix[-1].role != "user":
        raise ValueError("episode prefix must end with a user message")
    messages = list(prefix)
    if messages[0].role != "system":
        messages.insert(0, ChatMessage(role="system", content=build_system_prompt(tools)))

    def finish(outcome: str, calls: int, turns: int, parallel: int) -> Trajectory:
        return Trajectory(
            messages=messages,
            outcome=outcome,
            tool_call_count=calls,
            assistant_turns=turns,
            parallel_call_turns=parallel,
        )

    missing = sorted({b.server for b in tools} - set(sessions))
    if missing:
        return finish("connect_error", 0, 0, 0)
    bindings = {b.qualified: b for b in tools}
    schemas = tool_schemas(tools)
    call_count = turns = parallel = 0
    for _ in range(policy.max_assistant_turns):
        try:
            turn = gateway.chat(backend, messages, tool_schemas=schemas)
        except GatewayError:
            return finish("failed_start" if turns == 0 else "backend_error",
                          call_count, turns, parallel)
        turns += 1
        calls = turn.tool_calls[: policy.max_calls_per_turn]
        if not calls:
            messages.append(ChatMessage(role="assistant", content=turn.content))
            return finish("completed", call_count, turns, parallel)
        if turn.content:
            messages.append(ChatMessage(role="assistant", content=turn.content))
        for call in calls:
            messages.append(ChatMessage(role="assistant", content="", function_call=call))
        call_count += len(calls)
        if len(calls) >= 2:
            parallel += 1
        if len(calls) == 1:
            results = [
                resolve_tool_call(calls[0], bindings, sessions, policy.result_truncate_bytes)
            ]
        else:
            # parallel calls execute concurrently; results append in request order
            with ThreadPoolExecutor(max_workers=len(calls)) as pool:
                results = list(
                    pool.map(
                        lambda c: resolve_tool_call(
                            c, bindings, sessions, policy.result_truncate_bytes
                        ),
                        calls,
                    )
                )
        messages.extend(results)
    return finish("turn_limit", call_count, turns, parallel)


_ROLE_CODE = {"system": "s", "user": "u", "assistant": "a", "function": "f"}
_GRAMMAR = re.compile(r"s(u(af*)*a)+")


def check_message_grammar(messages: list[ChatMessage]) -> list[str]:
    """Problems with a message sequence; empty list means well-formed.

    Checks the role shape (one system, then user/assistant/function rounds
    each closed by a content assistant message) and that every function
    message answers exactly one earlier tool call, oldest first.
    """
    problems: list[str] = []
    codes = []
    for i, msg in enumerate(messages):
        code = _ROLE_CODE.get(msg.role)
        if code is None:
            problems.append(f"message {i}: unknown role {msg.role!r}")
            code = "?"
        codes.append(code)
    sequence = "".join(codes)
    if not _GRAMMAR.fullmatch(sequence):
        problems.append(f"role sequence not well-formed: {sequence or '<empty>'}")
    pending: deque[str] = deque()
    for i, msg in enumerate(messages):
        if msg.role == "assistant" and msg.function_call is not None:
            pending.append(msg.function_call.name)
        elif msg.role == "function":
            if not pending:
                problems.append(f"message {i}: function message with no pending tool call")
            else:
                expected = pending.popleft()
                if msg.name and msg.name != expected:
                    problems.append(
                        f"message {i}: function message for {msg.name!r}, expected {expected!r}"
                    )
        elif msg.role == "user" and pending:
            problems.append(f"message {i}: user message arrived with unanswered tool calls")
            pending.clear()
    if pending:
        problems.append(f"{len(pending)} tool call(s) never received a function message")
    return problems


@dataclass
class TurnView:
    """One maximal run of consecutive assistant messages."""

    call_count: int
    start: int


def assistant_turn_views(messages: list[ChatMessage]) -> list[TurnView]:
    """Recover turn structure from a message list: each maximal consecutive
    assistant run is one turn; its call count is the run's function_call tally."""
    views: list[TurnView] = []
    run_calls = 0
    run_start: int | None = None
    for i, msg in enumerate(messages):
        if msg.role == "assistant":
            if run_start is None:
                run_start = i
                run_calls = 0
            if msg.function_call is not None:
                run_calls += 1
        elif run_start is not None:
            views.append(TurnView(call_count=run_calls, start=run_start))
            run_start = None
    if run_start is not None:
        views.append(TurnView(call_count=run_calls, start=run_start))
    return views
