"""Run configuration.

A single YAML file drives the pipeline; environment variables are read only
for backend credentials (via each backend's api_key_env). Validation reports
every offending key at once, and the config hash pins resumed runs to the
configuration that started them.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import yaml

DEFAULT_MIXTURE = {"single": 0.5, "multi-same": 0.15, "multi-cross": 0.15, "featured": 0.2}

STRATEGIES = ("single", "multi-same", "multi-cross", "featured")
BACKEND_KINDS = ("http", "scripted", "demo-generator", "demo-judge", "demo-trajectory")
BACKEND_ROLES = ("task_generator", "judge", "trajectory")


class ConfigError(ValueError):
    pass


@dataclass
class PolicyConfig:
    """Numeric and threshold knobs for every pipeline stage."""

    max_tools: int = 3  # hard cap on target tools per task
    probe_timeout: float = 30.0
    tool_timeout: float = 30.0
    max_assistant_turns: int = 20
    max_calls_per_turn: int = 8
    result_truncate_bytes: int = 65536
    draft_retries: int = 1
    judge_retries: int = 1
    # task filter: per-dimension minimum scores
    stage3_thresholds: dict[str, int] = field(
        default_factory=lambda: {"question_quality": 3, "scenario_realism": 3}
    )
    # trajectory filter: judge-score minima applied after the rule checks
    stage5_thresholds: dict[str, int] = field(default_factory=dict)
    # fine-tuning selection
    sft_min_question_quality: int = 5
    sft_min_scenario_realism: int = 5
    sft_min_completeness: int = 4
    sft_min_conciseness: int = 4
    sft_min_tool_use: float = 1.0
    # extensions
    variation_count: int = 3
    follow_up_count: int = 2
    irrelevant_resample_attempts: int = 8
    # error-payload phrase table for tool responses (whole words, first 200 chars)
    error_phrases: tuple[str, ...] = ("error", "exception", "not found")

    @classmethod
    def from_dict(cls, raw: dict[str, Any], errors: list[str]) -> "PolicyConfig":
        policy = cls()
        for key, value in raw.items():
            if not hasattr(policy, key):
                errors.append(f"policy.{key}: unknown key")
                continue
            current = getattr(policy, key)
            if isinstance(current, tuple):
                value = tuple(value)
            setattr(policy, key, value)
        return policy


@dataclass
class BackendConfig:
    id: str
    kind: str
    role: str
    model: str = ""
    endpoint: str = ""
    rate_limit: float | None = None
    temperature: float = 0.0
    top_p: float = 1.0
    max_tokens: int = 2048
    script: str = ""  # fingerprint-script path for kind=scripted
    api_key_env: str = ""


@dataclass
class PipelineConfig:
    run_dir: str
    seed: int = 0
    workers: int = 1
    spec_dir: str = ""
    featured: list[str] = field(default_factory=list)
    tasks: int = 30
    mixture: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_MIXTURE))
    backends: list[BackendConfig] = field(default_factory=list)
    extensions: dict[str, bool] = field(
        default_factory=lambda: {"irrelevant": True, "diversify": True, "multiturn": True}
    )
    policy: PolicyConfig = field(default_factory=PolicyConfig)

    def backends_for(self, role: str) -> list[BackendConfig]:
        return [b for b in self.backends if b.role == role]


def _validate_backend(i: int, raw: Any, errors: list[str]) -> BackendConfig | None:
    prefix = f"backends[{i}]"
    if not isinstance(raw, dict):
        errors.append(f"{prefix}: must be a mapping")
        return None
    missing = [k for k in ("id", "kind", "role") if not raw.get(k)]
    for key in missing:
        errors.append(f"{prefix}.{key}: required")
    kind = raw.get("kind", "")
    if kind and kind not in BACKEND_KINDS:
        errors.append(f"{prefix}.kind: {kind!r} not one of {BACKEND_KINDS}")
    role = raw.get("role", "")
    if role and role not in BACKEND_ROLES:
        errors.append(f"{prefix}.role: {role!r} not one of {BACKEND_ROLES}")
    if kind == "http" and not raw.get("endpoint"):
        errors.append(f"{prefix}.endpoint: required for http backends")
    if kind == "scripted" and not raw.get("script"):
        errors.append(f"{prefix}.script: required for scripted backends")
    if missing:
        return None
    return BackendConfig(
        id=raw["id"],
        kind=kind,
        role=role,
        model=raw.get("model", raw["id"]),
        endpoint=raw.get("endpoint", ""),
        rate_limit=raw.get("rate_limit"),
        temperature=float(raw.get("temperature", 0.0)),
        top_p=float(raw.get("top_p", 1.0)),
        max_tokens=int(raw.get("max_tokens", 2048)),
        script=raw.get("script", ""),
        api_key_env=raw.get("api_key_env", ""),
    )


def parse_config(raw: dict[str, Any]) -> PipelineConfig:
    """Validate a loaded config mapping; raises ConfigError listing every
    offending key, not just the first."""
    errors: list[str] = []
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    if not raw.get("run_dir"):
        errors.append("run_dir: required")
    seed = raw.get("seed", 0)
    if not isinstance(seed, int):
        errors.append("seed: must be an integer")
        seed = 0
    workers = raw.get("workers", 1)
    if not isinstance(workers, int) or workers < 1:
        errors.append("workers: must be a positive integer")
        workers = 1
    mixture = dict(raw.get("mixture") or DEFAULT_MIXTURE)
    for name, weight in mixture.items():
        if name not in STRATEGIES:
            errors.append(f"mixture.{name}: unknown strategy")
        elif not isinstance(weight, (int, float)) or weight < 0:
            errors.append(f"mixture.{name}: weight must be non-negative")
    if mixture and sum(w for w in mixture.values() if isinstance(w, (int, float))) <= 0:
        errors.append("mixture: weights sum to zero")
    backends: list[BackendConfig] = []
    for i, entry in enumerate(raw.get("backends") or []):
        parsed = _validate_backend(i, entry, errors)
        if parsed is not None:
            backends.append(parsed)
    seen_ids: set[str] = set()
    for b in backends:
        if b.id in seen_ids:
            errors.append(f"backends: duplicate id {b.id!r}")
        seen_ids.add(b.id)
    policy = PolicyConfig.from_dict(raw.get("policy") or {}, errors)
    extensions = {"irrelevant": True, "diversify": True, "multiturn": True}
    for key, value in (raw.get("extensions") or {}).items():
        if key not in extensions:
            errors.append(f"extensions.{key}: unknown extension")
        else:
            extensions[key] = bool(value)
    tasks = raw.get("tasks", 30)
    if not isinstance(tasks, int) or tasks < 0:
        errors.append("tasks: must be a non-negative integer")
        tasks = 0
    known_top = {
        "run_dir", "seed", "workers", "spec_dir", "featured", "tasks",
        "mixture", "backends", "extensions", "policy",
    }
    for key in raw:
        if key not in known_top:
            errors.append(f"{key}: unknown top-level key")
    if errors:
        raise ConfigError("invalid config:\n  " + "\n  ".join(sorted(errors)))
    return PipelineConfig(
        run_dir=raw["run_dir"],
        seed=seed,
        workers=workers,
        spec_dir=raw.get("spec_dir", ""),
        featured=list(raw.get("featured") or []),
        tasks=tasks,
        mixture=mixture,
        backends=backends,
        extensions=extensions,
        policy=policy,
    )


def load_config(path: str | Path) -> PipelineConfig:
    try:
        raw = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"config file is not valid YAML: {exc}") from None
    return parse_config(raw or {})


def config_hash(config: PipelineConfig) -> str:
    """Canonical digest of everything that influences pipeline output.

    run_dir and workers are excluded on purpose: where a run lives and how
    many threads drive it must not change what it produces.
    """
    doc = asdict(config)
    doc.pop("run_dir", None)
    doc.pop("workers", None)
    canonical = json.dumps(doc, sort_keys=True, ensure_ascii=False, default=list)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()
