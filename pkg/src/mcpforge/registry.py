"""MCP server registry.

Parses server spec documents, applies the onboarding filters (transport and
credential requirements), health-probes declared tools, annotates servers
with category labels, and samples servers for task generation.
"""
from __future__ import annotations

import math
import random
from dataclasses import dataclass, field
from typing import Any, Callable

from .gateway import ChatMessage, TagSpec, extract_tagged, render_prompt
from .prompt_library import get_template

SUPPORTED_TRANSPORT = "streamable-http"

# Names that mark a required config entry as credential-bearing.
SECRET_NAME_MARKERS = ("key", "token", "secret", "password", "credential", "auth")

PREDEFINED_CATEGORIES = (
    "Web Search & Research",
    "Browser Automation",
    "Memory Management",
    "Operating System",
    "Data Analysis & Processing",
    "Cryptocurrency & Blockchain",
    "Daily Productivity",
    "File Management",
    "Database Operations",
    "API Integration",
    "Communication Tools",
    "Development Tools",
    "Security & Authentication",
    "Cloud Services",
    "AI/ML Tools",
    "Content Creation",
    "Social Media",
    "Financial Services",
    "E-commerce",
    "Gaming",
    "Education",
    "Health & Fitness",
    "Travel & Maps",
    "News & Media",
    "Weather",
    "Time & Calendar",
)


class SpecError(ValueError):
    pass


class SamplingError(RuntimeError):
    pass


class AnnotationError(RuntimeError):
    pass


@dataclass
class ToolSpec:
    name: str
    description: str = ""
    input_schema: dict[str, Any] = field(default_factory=dict)

    def as_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "description": self.description,
            "input_schema": self.input_schema,
        }


@dataclass
class ConfigRequirement:
    name: str
    required: bool = True
    secret: bool | None = None  # None: derive from the name


@dataclass
class CategoryLabel:
    primary: str
    secondary: list[str] = field(default_factory=list)
    custom: str | None = None

    def as_dict(self) -> dict[str, Any]:
        return {
            "primary": self.primary,
            "secondary": list(self.secondary),
            "custom": self.custom,
        }


@dataclass
class ServerSpec:
    qualified_name: str
    description: str
    transport: str
    display_name: str = ""
    endpoint_url: str = ""
    usage_count: int = 0
    config_requirements: list[ConfigRequirement] = field(default_factory=list)
    tools: list[ToolSpec] = field(default_factory=list)
    category: CategoryLabel | None = None

    def __post_init__(self) -> None:
        if not self.display_name:
            self.display_name = self.qualified_name

    def tool(self, name: str) -> ToolSpec | None:
        for t in self.tools:
            if t.name == name:
                return t
        return None

    def as_dict(self) -> dict[str, Any]:
        rec: dict[str, Any] = {
            "qualified_name": self.qualified_name,
            "display_name": self.display_name,
            "description": self.description,
            "transport": self.transport,
            "endpoint_url": self.endpoint_url,
            "usage_count": self.usage_count,
            "config_requirements": [
                {"name": r.name, "required": r.required, "secret": r.secret}
                for r in self.config_requirements
            ],
            "tools": [t.as_dict() for t in self.tools],
        }
        if self.category is not None:
            rec["category"] = self.category.as_dict()
        return rec


@dataclass
class HealthReport:
    server: str
    probed: int
    failures: dict[str, str]
    healthy: bool

    def as_dict(self) -> dict[str, Any]:
        return {
            "server": self.server,
            "probed": self.probed,
            "failures": dict(self.failures),
            "healthy": self.healthy,
        }


def _pick(doc: dict[str, Any], *names: str, default: Any = None) -> Any:
    for name in names:
        if name in doc:
            return doc[name]
    return default


def parse_server_spec(doc: dict[str, Any]) -> ServerSpec:
    """Build a ServerSpec from a registry document.

    Accepts snake_case and camelCase key spellings. Missing tool lists and
    duplicate tool names are errors; everything else gets safe defaults.
    """
    if not isinstance(doc, dict):
        raise SpecError("server spec document must be a JSON object")
    qualified = _pick(doc, "qualified_name", "qualifiedName")
    if not qualified or not isinstance(qualified, str):
        raise SpecError("server spec missing qualified_name")
    tools_doc = _pick(doc, "tools")
    if not isinstance(tools_doc, list) or not tools_doc:
        raise SpecError(f"server spec {qualified!r} missing tool list")
    tools: list[ToolSpec] = []
    seen: set[str] = set()
    for entry in tools_doc:
        if not isinstance(entry, dict) or not entry.get("name"):
            raise SpecError(f"server spec {qualified!r} has a malformed tool entry")
        name = entry["name"]
        if name in seen:
            raise SpecError(f"server spec {qualified!r} declares duplicate tool {name!r}")
        seen.add(name)
        schema = _pick(entry, "input_schema", "inputSchema", default={}) or {}
        tools.append(
            ToolSpec(name=name, description=entry.get("description", ""), input_schema=schema)
        )
    reqs: list[ConfigRequirement] = []
    for entry in _pick(doc, "config_requirements", "configRequirements", default=[]) or []:
        if not isinstance(entry, dict) or not entry.get("name"):
            raise SpecError(f"server spec {qualified!r} has a malformed config entry")
        reqs.append(
            ConfigRequirement(
                name=entry["name"],
                required=bool(entry.get("required", True)),
                secret=entry.get("secret"),
            )
        )
    usage = _pick(doc, "usage_count", "usageCount", default=0)
    try:
        usage = int(usage)
    except (TypeError, ValueError):
        raise SpecError(f"server spec {qualified!r} has non-numeric usage_count") from None
    return ServerSpec(
        qualified_name=qualified,
        display_name=_pick(doc, "display_name", "displayName", default="") or "",
        description=_pick(doc, "description", default="") or "",
        transport=_pick(doc, "transport", default="") or "",
        endpoint_url=_pick(doc, "endpoint_url", "endpointUrl", default="") or "",
        usage_count=usage,
        config_requirements=reqs,
        tools=tools,
    )


def spec_from_record(rec: dict[str, Any]) -> ServerSpec:
    """Rehydrate a spec previously written by ServerSpec.as_dict."""
    spec = parse_server_spec(rec)
    cat = rec.get("category")
    if cat:
        spec.category = CategoryLabel(
            primary=cat["primary"],
            secondary=list(cat.get("secondary", [])),
            custom=cat.get("custom"),
        )
    return spec


def secret_like(req: ConfigRequirement) -> bool:
    """Required config entries with credential-looking names block onboarding."""
    if not req.required:
        return False
    if req.secret is not None:
        return req.secret
    lowered = req.name.lower()
    return any(marker in lowered for marker in SECRET_NAME_MARKERS)


def onboarding_filter(
    specs: list[ServerSpec],
) -> tuple[list[ServerSpec], list[tuple[ServerSpec, list[str]]]]:
    """Partition specs into (retained, rejected-with-reasons).

    Keeps exactly the servers that speak streamable HTTP and need no
    credential configuration. Order-preserving, deterministic, idempotent.
    """
    retained: list[ServerSpec] = []
    rejected: list[tuple[ServerSpec, list[str]]] = []
    for spec in specs:
        reasons: list[str] = []
        if spec.transport != SUPPORTED_TRANSPORT:
            reasons.append(f"transport:{spec.transport or 'missing'}")
        for req in spec.config_requirements:
            if secret_like(req):
                reasons.append(f"credentials:{req.name}")
        if reasons:
            rejected.append((spec, reasons))
        else:
            retained.append(spec)
    return retained, rejected


def minimal_args(schema: dict[str, Any]) -> dict[str, Any]:
    """Smallest argument set satisfying a tool's input schema: required
    parameters only, with per-type filler values."""
    fillers: dict[str, Any] = {
        "string": "test",
        "number": 1,
        "integer": 1,
        "boolean": True,
        "array": [],
        "object": {},
    }
    props = schema.get("properties") or {}
    required = schema.get("required") or []
    args: dict[str, Any] = {}
    for name in required:
        prop = props.get(name) or {}
        args[name] = fillers.get(prop.get("type", "string"), "test")
    return args


def probe_server(
    spec: ServerSpec,
    session_factory: Callable[[ServerSpec], Any],
    timeout: float | None = None,
) -> HealthReport:
    """Call every declared tool once with minimal arguments.

    A connection failure marks all tools failed with probed = 0. The timeout
    argument is advisory; enforcing it is the session factory's job.
    """
    del timeout  # carried in the factory's client config
    try:
        session = session_factory(spec)
    except Exception as exc:
        failures = {t.name: f"connect: {exc}" for t in spec.tools}
        return HealthReport(spec.qualified_name, probed=0, failures=failures, healthy=False)
    failures: dict[str, str] = {}
    probed = 0
    try:
        for tool in spec.tools:
            probed += 1
            try:
                result = session.call_tool(tool.name, minimal_args(tool.input_schema))
            except Exception as exc:
                failures[tool.name] = f"call: {exc}"
                continue
            if result.is_error:
                failures[tool.name] = f"error result: {' '.join(result.content)[:200]}"
    finally:
        try:
            session.close()
        except Exception:
            pass
    healthy = not failures and probed == len(spec.tools)
    return HealthReport(spec.qualified_name, probed=probed, failures=failures, healthy=healthy)


def render_tool_list(spec: ServerSpec) -> str:
    return "\n".join(f"- {t.name}: {t.description}" for t in spec.tools)


def annotate_category(spec: ServerSpec, gateway: Any, backend: Any) -> CategoryLabel:
    """Ask the annotation model for category labels and validate them.

    Primary label outside the predefined set gets one retry, then raises.
    """
    prompt = render_prompt(
        get_template("server_category"),
        {
            "MCP_SERVER_NAME": spec.display_name,
            "MCP_SERVER_DESCRIPTION": spec.description,
            "TOOL_LIST": render_tool_list(spec),
        },
    )
    last = ""
    for _ in range(2):
        turn = gateway.chat(backend, [ChatMessage(role="user", content=prompt)])
        try:
            tags = extract_tagged(
                turn.content,
                [
                    TagSpec("primary_label"),
                    TagSpec("secondary_labels", required=False),
                    TagSpec("custom_label", required=False),
                ],
            )
        except ValueError as exc:
            last = str(exc)
            continue
        primary = tags["primary_label"][0].strip()
        if primary not in PREDEFINED_CATEGORIES:
            last = f"primary label not in the predefined set: {primary!r}"
            continue
        secondary = []
        if tags.get("secondary_labels"):
            for part in tags["secondary_labels"][0].split(","):
                part = part.strip()
                if part and part in PREDEFINED_CATEGORIES and part != primary:
                    secondary.append(part)
        custom = tags["custom_label"][0].strip() if tags.get("custom_label") else ""
        return CategoryLabel(primary=primary, secondary=secondary[:2], custom=custom or None)
    raise AnnotationError(f"category annotation failed for {spec.qualified_name}: {last}")


def usage_weight(spec: ServerSpec) -> float:
    """Popularity prior for sampling: 1 + ln(1 + usage_count)."""
    return 1.0 + math.log1p(max(0, spec.usage_count))


def _weighted_pick(specs: list[ServerSpec], rng: random.Random) -> ServerSpec:
    weights = [usage_weight(s) for s in specs]
    x = rng.random() * sum(weights)
    for spec, w in zip(specs, weights):
        x -= w
        if x < 0:
            return spec
    return specs[-1]


def _weighted_sample(specs: list[ServerSpec], k: int, rng: random.Random) -> list[ServerSpec]:
    pool = list(specs)
    picked: list[ServerSpec] = []
    for _ in range(k):
        choice = _weighted_pick(pool, rng)
        picked.append(choice)
        pool.remove(choice)
    return picked


class Registry:
    """Ordered collection of onboarded servers plus the featured subset."""

    def __init__(
        self, specs: list[ServerSpec] | None = None, featured: list[str] | None = None
    ) -> None:
        self._specs: dict[str, ServerSpec] = {}
        for spec in specs or []:
            self.add(spec)
        self.featured_names: list[str] = list(featured or [])

    def add(self, spec: ServerSpec) -> None:
        if spec.qualified_name in self._specs:
            raise SpecError(f"duplicate server: {spec.qualified_name}")
        self._specs[spec.qualified_name] = spec

    def get(self, qualified_name: str) -> ServerSpec:
        return self._specs[qualified_name]

    def servers(self) -> list[ServerSpec]:
        return list(self._specs.values())

    def __len__(self) -> int:
        return len(self._specs)

    def featured_specs(self) -> list[ServerSpec]:
        return [self._specs[name] for name in self.featured_names if name in self._specs]

    def by_category(self) -> dict[str, list[ServerSpec]]:
        out: dict[str, list[ServerSpec]] = {}
        for spec in self._specs.values():
            key = spec.category.primary if spec.category else ""
            out.setdefault(key, []).append(spec)
        return out

    def sample_selection(
        self, strategy: str, k_servers: int, rng: random.Random
    ) -> list[ServerSpec]:
        """Pick servers for one task draft.

        single: one usage-weighted server. multi-same: k servers sharing a
        primary category. multi-cross: k servers with pairwise distinct
        primary categories. featured: the whole configured featured set.
        """
        servers = self.servers()
        if strategy == "single":
            if not servers:
                raise SamplingError("registry is empty")
            return [_weighted_pick(servers, rng)]
        if strategy == "featured":
            featured = self.featured_specs()
            if not featured:
                raise SamplingError("no featured servers configured")
            return list(featured)
        if strategy == "multi-same":
            groups = [
                members
                for cat, members in sorted(self.by_category().items())
                if cat and len(members) >= k_servers
            ]
            if not groups:
                raise SamplingError(
                    f"no category holds {k_servers} servers for multi-same sampling"
                )
            weights = [sum(usage_weight(s) for s in g) for g in groups]
            x = rng.random() * sum(weights)
            chosen = groups[-1]
            for group, w in zip(groups, weights):
                x -= w
                if x < 0:
                    chosen = group
                    break
            return _weighted_sample(chosen, k_servers, rng)
        if strategy == "multi-cross":
            groups = {
                cat: members
                for cat, members in sorted(self.by_category().items())
                if cat
            }
            if len(groups) < k_servers:
                raise SamplingError(
                    f"need {k_servers} distinct categories, registry has {len(groups)}"
                )
            picked: list[ServerSpec] = []
            remaining = dict(groups)
            for _ in range(k_servers):
                cats = sorted(remaining)
                weights = [sum(usage_weight(s) for s in remaining[c]) for c in cats]
                x = rng.random() * sum(weights)
                chosen_cat = cats[-1]
                for cat, w in zip(cats, weights):
                    x -= w
                    if x < 0:
                        chosen_cat = cat
                        break
                picked.append(_weighted_pick(remaining.pop(chosen_cat), rng))
            return picked
        raise SamplingError(f"unknown sampling strategy: {strategy!r}")
