"""Shared test fixtures: a standard mock server fleet plus config builders.

Fixture discipline for the demo backends: tool and server names stay
identifier-like and every name and description is digit-free, so prompt
parsing in the deterministic stand-ins never misreads fixture text as a
requested tool count or a target name.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Any

from mcpforge.config import PipelineConfig, parse_config
from mcpforge.mockbed import MockServer, MockTool

QUERY_SCHEMA = {
    "type": "object",
    "properties": {"query": {"type": "string"}},
    "required": ["query"],
}


def tool(name: str, description: str, **kw: Any) -> MockTool:
    return MockTool(name=name, description=description, input_schema=QUERY_SCHEMA, **kw)


def standard_servers() -> list[MockServer]:
    return [
        MockServer(
            key="web-search",
            description="Searches the public web and opens result pages for reading.",
            tools=[
                tool("search_web", "Runs a ranked web search and returns result snippets."),
                tool("open_page", "Fetches one page by URL and returns readable text."),
                tool("summarize_page", "Produces a short summary of a fetched page."),
            ],
            usage_count=900,
        ),
        MockServer(
            key="doc-store",
            description="Stores team documents and renders them for sharing.",
            tools=[
                tool("create_doc", "Creates a new document with a title and body."),
                tool("append_section", "Appends a titled section to an existing document."),
                tool("export_doc", "Renders a document for sharing and returns a link."),
            ],
            usage_count=400,
        ),
        MockServer(
            key="mail-relay",
            description="Drafts and sends outbound mail on the user's behalf.",
            tools=[
                tool("draft_mail", "Creates a mail draft addressed to the given recipients."),
                tool("send_mail", "Sends a previously drafted mail message."),
            ],
            usage_count=250,
        ),
        MockServer(
            key="calendar-hub",
            description="Manages calendar events for the whole workspace.",
            tools=[
                tool("list_events", "Lists events within a date range."),
                tool("create_event", "Creates an event with attendees and an agenda."),
                tool("cancel_event", "Cancels an event and notifies attendees."),
            ],
            usage_count=130,
        ),
        MockServer(
            key="repo-browser",
            description="Read-only access to source repositories.",
            tools=[
                tool("list_repos", "Lists repositories visible to the workspace."),
                tool("read_blob", "Reads one file from a repository at a given revision."),
                tool("search_code", "Searches source code and returns matching lines."),
            ],
            usage_count=75,
        ),
        MockServer(
            key="metrics-board",
            description="Queries service metrics and renders charts.",
            tools=[
                tool("query_series", "Evaluates a metric expression over a time window."),
                tool("render_chart", "Renders a chart image for a metric query."),
            ],
            usage_count=60,
        ),
    ]


def write_spec_dir(spec_dir: Path, fleet: Any, servers: list[MockServer]) -> Path:
    spec_dir.mkdir(parents=True, exist_ok=True)
    for server in servers:
        rec = server.spec_record(fleet.endpoint(server.key))
        (spec_dir / f"{server.key}.json").write_text(
            json.dumps(rec, indent=2), encoding="utf-8"
        )
    return spec_dir


def demo_config(run_dir: Path, spec_dir: Path, **overrides: Any) -> PipelineConfig:
    doc = {
        "run_dir": str(run_dir),
        "seed": 7,
        "workers": 1,
        "spec_dir": str(spec_dir),
        "featured": ["web-search", "doc-store"],
        "tasks": 30,
        "backends": [
            {"id": "gen", "kind": "demo-generator", "role": "task_generator"},
            {"id": "grade", "kind": "demo-judge", "role": "judge"},
            {"id": "pilot", "kind": "demo-trajectory", "role": "trajectory"},
        ],
    }
    doc.update(overrides)
    return parse_config(doc)


# ---------------------------------------------------------------------------
# Hand-labeled onboarding corpus: 20 documents with a known keep/reject split.
# ---------------------------------------------------------------------------


def _doc(key: str, **kw: Any) -> dict[str, Any]:
    base: dict[str, Any] = {
        "qualified_name": key,
        "display_name": key,
        "description": "A workspace service used only for onboarding checks.",
        "transport": "streamable-http",
        "endpoint_url": "",
        "usage_count": 10,
        "tools": [
            {
                "name": "lookup_entry",
                "description": "Looks up one entry by its key.",
                "input_schema": QUERY_SCHEMA,
            }
        ],
    }
    base.update(kw)
    return base


def onboarding_corpus() -> tuple[list[MockServer], list[dict[str, Any]], dict[str, str]]:
    """Returns (live mock servers, the 20 spec documents, expected verdicts).

    Verdicts map qualified name to "keep" or the rejection family
    ("transport", "credentials", "health", "spec"). Endpoint URLs are left
    empty here; the caller points each live document at its fleet endpoint.
    """
    live = standard_servers() + [
        MockServer(
            key="flaky-probe",
            description="A service whose only tool always reports failure.",
            tools=[tool("broken_call", "Always reports a failed invocation.", behavior="error")],
        ),
        MockServer(
            key="half-broken",
            description="A service with one good tool and one failing tool.",
            tools=[
                tool("good_call", "Echoes its argument back."),
                tool("bad_call", "Always reports a failed invocation.", behavior="error"),
            ],
        ),
        MockServer(
            key="open-config",
            description="A service with only non-secret configuration.",
            tools=[tool("load_profile", "Loads the active workspace profile.")],
            config_requirements=[{"name": "workspace", "required": True}],
        ),
        MockServer(
            key="optional-key",
            description="A service whose credential is optional.",
            tools=[tool("read_status", "Reads the current service status.")],
            config_requirements=[{"name": "api_key", "required": False}],
        ),
    ]
    docs: list[dict[str, Any]] = []
    verdicts: dict[str, str] = {}
    for server in live[:6]:
        docs.append(server.spec_record(""))
        verdicts[server.key] = "keep"
    for server in live[6:8]:
        docs.append(server.spec_record(""))
        verdicts[server.key] = "health"
    for server in live[8:10]:
        docs.append(server.spec_record(""))
        verdicts[server.key] = "keep"

    docs.append(_doc("stdio-only", transport="stdio"))
    verdicts["stdio-only"] = "transport"
    docs.append(_doc("sse-only", transport="sse"))
    verdicts["sse-only"] = "transport"
    docs.append(_doc("no-transport", transport=""))
    verdicts["no-transport"] = "transport"
    docs.append(
        _doc(
            "needs-key",
            config_requirements=[{"name": "api_key", "required": True}],
        )
    )
    verdicts["needs-key"] = "credentials"
    docs.append(
        _doc(
            "needs-token",
            config_requirements=[{"name": "workspace", "required": True, "secret": True}],
        )
    )
    verdicts["needs-token"] = "credentials"
    docs.append(
        _doc(
            "needs-password",
            config_requirements=[{"name": "password", "required": True}],
        )
    )
    verdicts["needs-password"] = "credentials"
    docs.append(_doc("dead-endpoint"))  # valid spec, nothing listening
    verdicts["dead-endpoint"] = "health"
    docs.append(_doc("no-tools", tools=[]))
    verdicts["no-tools"] = "spec"
    docs.append(
        _doc(
            "dup-tools",
            tools=[
                {"name": "lookup_entry", "description": "First copy."},
                {"name": "lookup_entry", "description": "Second copy."},
            ],
        )
    )
    verdicts["dup-tools"] = "spec"
    docs.append(_doc("bad-usage", usage_count="many"))
    verdicts["bad-usage"] = "spec"

    assert len(docs) == 20
    return live, docs, verdicts
