"""Minimal MCP client over the streamable HTTP transport.

Speaks JSON-RPC 2.0 via HTTP POST. Servers may answer with plain JSON or an
SSE stream; both are accepted and the response frame is matched to the
request id. Transport failures get one retry, protocol errors none.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any

import httpx

PROTOCOL_VERSION = "2025-03-26"
CLIENT_INFO = {"name": "mcpforge", "version": "0.1.0"}
ACCEPT = "application/json, text/event-stream"

DEFAULT_TIMEOUT = 30.0
TRANSPORT_RETRIES = 1


class McpError(RuntimeError):
    pass


class McpTransportError(McpError):
    pass


class McpTimeout(McpTransportError):
    pass


class McpProtocolError(McpError):
    pass


class UnknownToolError(McpProtocolError):
    pass


@dataclass
class ToolResult:
    """Text blocks plus error flag from one tools/call, with the verbatim
    response body kept for auditing."""

    content: list[str]
    is_error: bool = False
    raw: str = ""

    def text(self) -> str:
        return "\n".join(self.content)


@dataclass
class Session:
    endpoint: str
    session_id: str | None = None
    protocol_version: str = ""
    state: str = "ready"  # ready | closed
    _client: httpx.Client | None = None
    _owns_client: bool = False
    _next_id: int = field(default=1)

    def list_tools(self) -> list[dict[str, Any]]:
        return list_tools(self)

    def call_tool(self, name: str, arguments: dict[str, Any]) -> ToolResult:
        return call_tool(self, name, arguments)

    def close(self) -> None:
        close(self)


def _headers(session_id: str | None) -> dict[str, str]:
    headers = {"Content-Type": "application/json", "Accept": ACCEPT}
    if session_id:
        headers["mcp-session-id"] = session_id
    return headers


def _parse_sse(body: str, want_id: int) -> dict[str, Any]:
    """Accumulate data: frames and return the response matching want_id.

    Interleaved notifications and unrelated frames are skipped.
    """
    for raw_line in body.splitlines():
        line = raw_line.strip()
        if not line.startswith("data:"):
            continue
        payload = line[len("data:"):].strip()
        if not payload:
            continue
        try:
            message = json.loads(payload)
        except ValueError:
            continue
        if isinstance(message, dict) and message.get("id") == want_id:
            return message
    raise McpProtocolError(f"stream held no response for request id {want_id}")


def _roundtrip(
    client: httpx.Client,
    endpoint: str,
    session_id: str | None,
    payload: dict[str, Any],
) -> httpx.Response:
    attempts = TRANSPORT_RETRIES + 1
    last: Exception | None = None
    for _ in range(attempts):
        try:
            return client.post(endpoint, json=payload, headers=_headers(session_id))
        except httpx.TimeoutException as exc:
            last = McpTimeout(f"request timed out: {exc}")
        except httpx.HTTPError as exc:
            last = McpTransportError(f"request failed: {exc}")
    assert last is not None
    raise last


def _request(session: Session, method: str, params: dict[str, Any]) -> dict[str, Any]:
    if session.state != "ready":
        raise McpError(f"session to {session.endpoint} is {session.state}")
    assert session._client is not None
    request_id = session._next_id
    session._next_id += 1
    payload = {"jsonrpc": "2.0", "id": request_id, "method": method, "params": params}
    resp = _roundtrip(session._client, session.endpoint, session.session_id, payload)
    if resp.status_code >= 400:
        raise McpTransportError(f"{method} returned HTTP {resp.status_code}")
    content_type = resp.headers.get("content-type", "")
    if content_type.startswith("text/event-stream"):
        message = _parse_sse(resp.text, request_id)
    else:
        try:
            message = resp.json()
        except ValueError as exc:
            raise McpProtocolError(f"{method} returned non-JSON body") from exc
        if message.get("id") != request_id:
            raise McpProtocolError(
                f"{method} response id {message.get('id')!r} does not match {request_id}"
            )
    if "error" in message:
        err = message["error"] or {}
        text = f"{method} failed: [{err.get('code')}] {err.get('message')}"
        lowered = str(err.get("message", "")).lower()
        if method == "tools/call" and (err.get("code") == -32602 or "unknown tool" in lowered):
            raise UnknownToolError(text)
        raise McpProtocolError(text)
    return message.get("result") or {}


def _notify(session: Session, method: str) -> None:
    assert session._client is not None
    payload = {"jsonrpc": "2.0", "method": method}
    resp = _roundtrip(session._client, session.endpoint, session.session_id, payload)
    if resp.status_code >= 400:
        raise McpTransportError(f"notification {method} returned HTTP {resp.status_code}")


def connect(
    endpoint: str,
    timeout: float = DEFAULT_TIMEOUT,
    client: httpx.Client | None = None,
) -> Session:
    """Initialize a session: handshake, capture the session id, announce
    readiness. Raises McpTransportError when unreachable, McpProtocolError
    when the server rejects the handshake."""
    owns = client is None
    client = client or httpx.Client(timeout=timeout)
    session = Session(endpoint=endpoint, _client=client, _owns_client=owns)
    payload = {
        "jsonrpc": "2.0",
        "id": 0,
        "method": "initialize",
        "params": {
            "protocolVersion": PROTOCOL_VERSION,
            "capabilities": {},
            "clientInfo": CLIENT_INFO,
        },
    }
    try:
        resp = _roundtrip(client, endpoint, None, payload)
    except McpTransportError:
        if owns:
            client.close()
        raise
    if resp.status_code >= 400:
        if owns:
            client.close()
        raise McpTransportError(f"initialize returned HTTP {resp.status_code}")
    content_type = resp.headers.get("content-type", "")
    try:
        if content_type.startswith("text/event-stream"):
            message = _parse_sse(resp.text, 0)
        else:
            message = resp.json()
    except (ValueError, McpProtocolError) as exc:
        if owns:
            client.close()
        raise McpProtocolError(f"initialize returned malformed body: {exc}") from exc
    if "error" in message:
        err = message["error"] or {}
        if owns:
            client.close()
        raise McpProtocolError(
            f"server rejected initialize: [{err.get('code')}] {err.get('message')}"
        )
    result = message.get("result") or {}
    session.session_id = resp.headers.get("mcp-session-id")
    session.protocol_version = result.get("protocolVersion", "")
    _notify(session, "notifications/initialized")
    return session


def list_tools(session: Session) -> list[dict[str, Any]]:
    """All advertised tool descriptors, following nextCursor pagination.
    Order is preserved across pages."""
    tools: list[dict[str, Any]] = []
    cursor: str | None = None
    while True:
        params: dict[str, Any] = {}
        if cursor is not None:
            params["cursor"] = cursor
        result = _request(session, "tools/list", params)
        page = result.get("tools")
        if not isinstance(page, list):
            raise McpProtocolError("tools/list result missing tool array")
        tools.extend(page)
        cursor = result.get("nextCursor")
        if not cursor:
            return tools


def call_tool(session: Session, name: str, arguments: dict[str, Any]) -> ToolResult:
    result = _request(session, "tools/call", {"name": name, "arguments": arguments})
    blocks = [
        block.get("text", "")
        for block in result.get("content") or []
        if isinstance(block, dict) and block.get("type") == "text"
    ]
    return ToolResult(
        content=blocks,
        is_error=bool(result.get("isError")),
        raw=json.dumps(result, ensure_ascii=False, sort_keys=True),
    )


def close(session: Session) -> None:
    if session.state == "closed":
        return
    session.state = "closed"
    if session._owns_client and session._client is not None:
        session._client.close()
