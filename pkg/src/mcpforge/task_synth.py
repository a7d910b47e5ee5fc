"""Task synthesis.

Turns sampled server metadata into task drafts through the generation
templates: single-server (one or several tools), multi-server, and featured.
Generator output is parsed tolerantly, validated strictly, and retried once
with a fresh sample before a draft is rejected.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Any

from .config import PolicyConfig
from .gateway import (
    ChatMessage,
    TagParseError,
    TagSpec,
    extract_attributed,
    extract_tagged,
    render_prompt,
)
from .prompt_library import get_template
from .registry import ServerSpec, ToolSpec, render_tool_list

DRAFT_STRATEGIES = (
    "single",
    "multi",
    "featured",
    "irrelevant",
    "diversify-persona",
    "diversify-constraint",
)


class DraftError(ValueError):
    pass


class DraftRejected(RuntimeError):
    def __init__(self, reasons: list[str]) -> None:
        super().__init__("; ".join(reasons))
        self.reasons = reasons


def qualify(server: ServerSpec | str, tool: ToolSpec | str) -> str:
    server_name = server if isinstance(server, str) else server.qualified_name
    tool_name = tool if isinstance(tool, str) else tool.name
    return f"{server_name}-{tool_name}"


def resolve_target(
    name: str, servers: list[ServerSpec]
) -> tuple[ServerSpec, ToolSpec] | None:
    """Find the (server, tool) a target name refers to.

    Server-qualified names resolve by prefix; bare names resolve only when
    exactly one context server declares that tool.
    """
    for server in servers:
        prefix = f"{server.qualified_name}-"
        if name.startswith(prefix):
            tool = server.tool(name[len(prefix):])
            if tool is not None:
                return server, tool
    owners = [
        (server, tool)
        for server in servers
        if (tool := server.tool(name)) is not None
    ]
    if len(owners) == 1:
        return owners[0]
    return None


@dataclass
class TaskDraft:
    question: str
    target_tools: list[str]  # server-qualified names, in intended call order
    context_servers: list[ServerSpec]
    strategy: str
    seed: int = 0
    generator_id: str = ""
    analysis: str = ""
    parent_question: str = ""  # set on extension drafts
    metadata: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.strategy not in DRAFT_STRATEGIES:
            raise DraftError(f"unknown draft strategy: {self.strategy!r}")

    def bare_targets(self) -> list[str]:
        out: list[str] = []
        for name in self.target_tools:
            hit = resolve_target(name, self.context_servers)
            out.append(hit[1].name if hit else name)
        return out

    def target_display(self) -> str:
        return ", ".join(self.bare_targets())


def render_server_descriptions(servers: list[ServerSpec]) -> str:
    blocks = []
    for spec in servers:
        blocks.append(
            f"### {spec.display_name} (qualified name: {spec.qualified_name})\n"
            f"{spec.description}\n"
            f"Tools:\n{render_tool_list(spec)}"
        )
    return "\n\n".join(blocks)


def _leaks(question: str, bare_name: str) -> bool:
    return bool(
        re.search(
            rf"(?<![A-Za-z0-9_]){re.escape(bare_name)}(?![A-Za-z0-9_])",
            question,
            re.IGNORECASE,
        )
    )


def validate_draft(draft: TaskDraft, policy: PolicyConfig | None = None) -> list[str]:
    """All contract violations for a draft; empty list means valid."""
    violations: list[str] = []
    if not draft.question.strip():
        violations.append("empty question")
    if draft.strategy == "irrelevant":
        if draft.target_tools:
            violations.append("irrelevance drafts must carry no target tools")
    else:
        if not draft.target_tools:
            violations.append("no target tools")
        if policy is not None and len(draft.target_tools) > policy.max_tools:
            violations.append(
                f"{len(draft.target_tools)} target tools exceed the cap of {policy.max_tools}"
            )
    owning_servers: set[str] = set()
    for name in draft.target_tools:
        hit = resolve_target(name, draft.context_servers)
        if hit is None:
            violations.append(f"unknown target tool: {name}")
            continue
        owning_servers.add(hit[0].qualified_name)
        if _leaks(draft.question, hit[1].name):
            violations.append(f"question leaks tool name: {hit[1].name}")
    if draft.strategy in ("multi", "featured") and len(owning_servers) < 2:
        violations.append("cross-server task must target at least 2 servers")
    return violations


def _chat_text(gateway: Any, backend: Any, prompt: str) -> str:
    turn = gateway.chat(backend, [ChatMessage(role="user", content=prompt)])
    return turn.content


def _parse_single(text: str, k: int, server: ServerSpec) -> tuple[str, list[str], str]:
    if k == 1:
        tags = extract_tagged(
            text,
            [TagSpec("server_analysis", required=False), TagSpec("target_tool"), TagSpec("question")],
        )
        names = [tags["target_tool"][0].strip()]
    else:
        tags = extract_tagged(
            text,
            [TagSpec("server_analysis", required=False), TagSpec("target_tools"), TagSpec("question")],
        )
        entries = extract_attributed(tags["target_tools"][0], "tool")
        names = [content.strip() for _, content in entries]
        if not names:
            raise DraftError("target_tools block holds no <tool> entries")
    analysis = tags["server_analysis"][0] if tags.get("server_analysis") else ""
    if len(names) != k:
        raise DraftError(f"expected {k} target tools, generator returned {len(names)}")
    qualified = []
    for name in names:
        hit = resolve_target(name, [server])
        if hit is None:
            raise DraftError(f"unknown target tool: {name}")
        qualified.append(qualify(hit[0], hit[1]))
    return tags["question"][0], qualified, analysis


def synth_single(
    server: ServerSpec,
    k: int,
    gateway: Any,
    backend: Any,
    policy: PolicyConfig | None = None,
    seed: int = 0,
) -> TaskDraft:
    """One draft against a single server, targeting exactly k of its tools."""
    policy = policy or PolicyConfig()
    assert 1 <= k <= policy.max_tools, "k outside the target-tool budget"
    assert k <= len(server.tools), "server declares fewer than k tools"
    if k == 1:
        template = get_template("task_single_one_tool")
        bindings = {
            "MCP_SERVER_NAME": server.display_name,
            "MCP_SERVER_DESCRIPTION": server.description,
            "TOOL_LIST": render_tool_list(server),
        }
    else:
        template = get_template("task_single_multi_tool")
        bindings = {
            "NUM_TOOLS": str(k),
            "MCP_SERVER_NAME": server.display_name,
            "MCP_SERVER_DESCRIPTION": server.description,
            "TOOL_LIST": render_tool_list(server),
        }
    prompt = render_prompt(template, bindings)
    failures: list[str] = []
    for _ in range(policy.draft_retries + 1):
        try:
            question, targets, analysis = _parse_single(
                _chat_text(gateway, backend, prompt), k, server
            )
        except (TagParseError, DraftError) as exc:
            failures.append(str(exc))
            continue
        draft = TaskDraft(
            question=question.strip(),
            target_tools=targets,
            context_servers=[server],
            strategy="single",
            seed=seed,
            generator_id=getattr(getattr(backend, "profile", None), "id", ""),
            analysis=analysis,
        )
        violations = validate_draft(draft, policy)
        if not violations:
            return draft
        failures.extend(violations)
    raise DraftRejected(failures)


def _parse_cross(
    text: str, k: int, servers: list[ServerSpec]
) -> tuple[str, list[str], str]:
    tags = extract_tagged(
        text,
        [
            TagSpec("server_analysis", required=False),
            TagSpec("cross_server_workflow", required=False),
            TagSpec("target_tools"),
            TagSpec("question"),
        ],
    )
    entries = extract_attributed(tags["target_tools"][0], "tool")
    if not entries:
        raise DraftError("target_tools block holds no <tool> entries")
    if len(entries) != k:
        raise DraftError(f"expected {k} target tools, generator returned {len(entries)}")
    by_name = {s.qualified_name.lower(): s for s in servers}
    by_display = {s.display_name.lower(): s for s in servers}
    qualified: list[str] = []
    for attrs, name in entries:
        name = name.strip()
        label = attrs.get("server", "").strip().lower()
        server = by_name.get(label) or by_display.get(label)
        if label and server is None:
            raise DraftError(f"tool {name!r} references unknown server {attrs.get('server')!r}")
        search_in = [server] if server is not None else servers
        hit = resolve_target(name, search_in)
        if hit is None:
            raise DraftError(f"unknown target tool: {name}")
        qualified.append(qualify(hit[0], hit[1]))
    analysis_parts = []
    if tags.get("server_analysis"):
        analysis_parts.append(tags["server_analysis"][0])
    if tags.get("cross_server_workflow"):
        analysis_parts.append(tags["cross_server_workflow"][0])
    return tags["question"][0], qualified, "\n".join(analysis_parts)


def _synth_cross(
    template_id: str,
    slot: str,
    servers: list[ServerSpec],
    k: int,
    gateway: Any,
    backend: Any,
    policy: PolicyConfig,
    seed: int,
    strategy: str,
) -> TaskDraft:
    prompt = render_prompt(
        get_template(template_id),
        {"NUM_TOOLS": str(k), slot: render_server_descriptions(servers)},
    )
    failures: list[str] = []
    for _ in range(policy.draft_retries + 1):
        try:
            question, targets, analysis = _parse_cross(
                _chat_text(gateway, backend, prompt), k, servers
            )
        except (TagParseError, DraftError) as exc:
            failures.append(str(exc))
            continue
        draft = TaskDraft(
            question=question.strip(),
            target_tools=targets,
            context_servers=list(servers),
            strategy=strategy,
            seed=seed,
            generator_id=getattr(getattr(backend, "profile", None), "id", ""),
            analysis=analysis,
        )
        violations = validate_draft(draft, policy)
        if not violations:
            return draft
        failures.extend(violations)
    raise DraftRejected(failures)


def synth_multi(
    selection: list[ServerSpec],
    k: int,
    gateway: Any,
    backend: Any,
    policy: PolicyConfig | None = None,
    seed: int = 0,
) -> TaskDraft:
    """One cross-server draft over the sampled selection: k tools spanning
    at least two different servers."""
    policy = policy or PolicyConfig()
    assert len(selection) >= 2, "multi-server synthesis needs at least 2 servers"
    assert 2 <= k <= policy.max_tools
    return _synth_cross(
        "task_multi_server",
        "SERVER_DESCRIPTIONS",
        selection,
        k,
        gateway,
        backend,
        policy,
        seed,
        "multi",
    )


def synth_featured(
    featured: list[ServerSpec],
    k: int,
    gateway: Any,
    backend: Any,
    policy: PolicyConfig | None = None,
    seed: int = 0,
) -> TaskDraft:
    """One draft over the whole featured set; the generator combines servers
    freely but must still span at least two of them."""
    policy = policy or PolicyConfig()
    assert len(featured) >= 2, "featured synthesis needs at least 2 servers"
    assert 2 <= k <= policy.max_tools
    return _synth_cross(
        "task_featured",
        "FEATURED_SERVER_DESCRIPTIONS",
        featured,
        k,
        gateway,
        backend,
        policy,
        seed,
        "featured",
    )
