"""Prompt template catalog.

The nine templates driving category annotation, task generation,
diversification, and quality judging are vendored verbatim; their bodies are
data, not code, and must never be edited in place. Pipeline customization
happens by registering new template ids. Two additional templates authored
for the multi-turn extension live alongside them.
"""
from __future__ import annotations

import hashlib
from importlib import resources

from .gateway import PromptTemplate, template_slots

# Vendored set: ids and the slots each body must expose.
VENDORED_TEMPLATES: dict[str, tuple[str, ...]] = {
    "server_category": ("MCP_SERVER_NAME", "MCP_SERVER_DESCRIPTION", "TOOL_LIST"),
    "task_single_one_tool": ("MCP_SERVER_NAME", "MCP_SERVER_DESCRIPTION", "TOOL_LIST"),
    "task_single_multi_tool": (
        "NUM_TOOLS",
        "MCP_SERVER_NAME",
        "MCP_SERVER_DESCRIPTION",
        "TOOL_LIST",
    ),
    "task_multi_server": ("NUM_TOOLS", "SERVER_DESCRIPTIONS"),
    "task_featured": ("NUM_TOOLS", "FEATURED_SERVER_DESCRIPTIONS"),
    "diversify_persona": (
        "ORIGINAL_QUESTION",
        "TARGET_TOOLS",
        "TOOL_DESCRIPTIONS",
        "VARIATIONS_COUNT",
    ),
    "diversify_constraint": (
        "ORIGINAL_QUESTION",
        "TARGET_TOOLS",
        "TOOL_DESCRIPTIONS",
        "VARIATIONS_COUNT",
    ),
    "task_quality": (
        "ALL_SERVER_AND_TOOL_INFORMATION",
        "QUESTION_CONTENT",
        "INTENDED_TOOL",
    ),
    "traj_quality": ("QUESTION_CONTENT", "INTENDED_TOOL", "CONVERSATION_HISTORY"),
}

# Authored for the multi-turn extension; not part of the vendored set.
EXTENSION_TEMPLATES: dict[str, tuple[str, ...]] = {
    "multiturn_split": ("ORIGINAL_QUESTION", "TARGET_TOOLS", "TOOL_DESCRIPTIONS"),
    "follow_up": ("CONVERSATION_HISTORY",),
}


class TemplateNotFound(KeyError):
    pass


def _load_body(template_id: str) -> str:
    path = resources.files("mcpforge").joinpath(f"prompts/{template_id}.md")
    return path.read_text(encoding="utf-8")


class TemplateCatalog:
    """Loads and indexes the shipped templates plus any registered extras."""

    def __init__(self) -> None:
        self._templates: dict[str, PromptTemplate] = {}
        for template_id in {**VENDORED_TEMPLATES, **EXTENSION_TEMPLATES}:
            body = _load_body(template_id)
            self._templates[template_id] = PromptTemplate(
                id=template_id, body=body, required_slots=template_slots(body)
            )

    def get(self, template_id: str) -> PromptTemplate:
        try:
            return self._templates[template_id]
        except KeyError:
            raise TemplateNotFound(
                f"unknown prompt template: {template_id!r}"
            ) from None

    def register(self, template_id: str, body: str) -> PromptTemplate:
        # new ids only; the shipped bodies are immutable
        if template_id in self._templates:
            raise ValueError(f"template id already taken: {template_id!r}")
        tpl = PromptTemplate(
            id=template_id, body=body, required_slots=template_slots(body)
        )
        self._templates[template_id] = tpl
        return tpl

    def ids(self) -> tuple[str, ...]:
        return tuple(sorted(self._templates))

    def vendored_ids(self) -> tuple[str, ...]:
        return tuple(sorted(VENDORED_TEMPLATES))

    def checksums(self) -> dict[str, str]:
        """sha256 per template body; pinned by tests so edits are loud."""
        return {
            tid: hashlib.sha256(t.body.encode("utf-8")).hexdigest()
            for tid, t in sorted(self._templates.items())
        }


_default: TemplateCatalog | None = None


def default_catalog() -> TemplateCatalog:
    global _default
    if _default is None:
        _default = TemplateCatalog()
    return _default


def get_template(template_id: str) -> PromptTemplate:
    return default_catalog().get(template_id)
