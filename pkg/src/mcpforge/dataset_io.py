"""Dataset assembly, serialization, and corpus statistics.

Instances carry the full conversation plus both quality assessments and a
provenance metadata block. Identity is content-derived: the uuid is a pure
function of (question, subset, generator backend, seed), so re-runs produce
identical ids and resumed runs can skip finished work.
"""
from __future__ import annotations

import json
import os
import uuid as uuid_mod
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Iterator

from .agent_runtime import Trajectory, assistant_turn_views, check_message_grammar
from .config import PolicyConfig
from .gateway import ChatMessage, ToolCall
from .judge import ResponseAssessment, TaskAssessment, sft_select
from .task_synth import TaskDraft

SUBSETS = ("single-turn-original", "irrelevant", "single-turn-diversify", "multi-turn")

_STRATEGY_SUBSET = {
    "single": "single-turn-original",
    "multi": "single-turn-original",
    "featured": "single-turn-original",
    "irrelevant": "irrelevant",
    "diversify-persona": "single-turn-diversify",
    "diversify-constraint": "single-turn-diversify",
}

UUID_NAMESPACE = uuid_mod.uuid5(uuid_mod.NAMESPACE_DNS, "mcpforge.dataset")


class AssemblyError(ValueError):
    pass


class RecordError(ValueError):
    pass


def subset_for_strategy(strategy: str, multiturn: bool = False) -> str:
    if multiturn:
        return "multi-turn"
    try:
        return _STRATEGY_SUBSET[strategy]
    except KeyError:
        raise AssemblyError(f"no subset mapping for strategy {strategy!r}") from None


def instance_uuid(question: str, subset: str, generator_id: str, seed: int) -> str:
    key = "\x1f".join((subset, generator_id, str(seed), question))
    return str(uuid_mod.uuid5(UUID_NAMESPACE, key))


def message_to_record(msg: ChatMessage) -> dict[str, Any]:
    rec: dict[str, Any] = {"role": msg.role, "content": msg.content}
    if msg.function_call is not None:
        args = msg.function_call.raw_arguments
        if args is None:
            args = json.dumps(msg.function_call.arguments, ensure_ascii=False, sort_keys=True)
        rec["function_call"] = {"name": msg.function_call.name, "arguments": args}
    if msg.name is not None:
        rec["name"] = msg.name
    return rec


def message_from_record(rec: dict[str, Any]) -> ChatMessage:
    call = None
    if rec.get("function_call"):
        fc = rec["function_call"]
        raw = fc.get("arguments", "")
        if isinstance(raw, dict):
            # tolerated on input; serialization always emits a JSON string
            parsed, raw, parse_error = raw, None, False
        else:
            try:
                parsed = json.loads(raw) if raw.strip() else {}
                parse_error = not isinstance(parsed, dict)
            except ValueError:
                parsed, parse_error = {}, True
        call = ToolCall(
            name=fc.get("name", ""),
            arguments=parsed if isinstance(parsed, dict) else {},
            raw_arguments=raw if isinstance(raw, str) else None,
            parse_error=parse_error,
        )
    return ChatMessage(
        role=rec["role"],
        content=rec.get("content", "") or "",
        function_call=call,
        name=rec.get("name"),
    )


@dataclass
class DatasetInstance:
    uuid: str
    subset: str
    question: str
    target_tools: str  # comma-joined bare tool names, "" for irrelevant
    messages: list[ChatMessage]
    question_quality_assessment: dict[str, Any] = field(default_factory=dict)
    response_quality_assessment: dict[str, Any] = field(default_factory=dict)
    metadata: dict[str, Any] = field(default_factory=dict)

    @property
    def messages_num_rounds(self) -> int:
        # every message counts toward the round tally, whatever its role
        return len(self.messages)

    def to_record(self) -> dict[str, Any]:
        return {
            "uuid": self.uuid,
            "subset": self.subset,
            "question": self.question,
            "target_tools": self.target_tools,
            "question_quality_assessment": self.question_quality_assessment,
            "response_quality_assessment": self.response_quality_assessment,
            "messages": [message_to_record(m) for m in self.messages],
            "messages_num_rounds": self.messages_num_rounds,
            "metadata": self.metadata,
        }


def assemble_instance(
    draft: TaskDraft,
    trajectory: Trajectory,
    task_assessment: TaskAssessment | None,
    response_assessment: ResponseAssessment | None,
    subset: str | None = None,
    metadata: dict[str, Any] | None = None,
) -> DatasetInstance:
    """Combine one pipeline item into a dataset instance.

    Refuses grammar-violating conversations, unknown subsets, and any
    disagreement between the subset tag and the target-tool list.
    """
    subset = subset or subset_for_strategy(draft.strategy)
    if subset not in SUBSETS:
        raise AssemblyError(f"unknown subset: {subset!r}")
    problems = check_message_grammar(trajectory.messages)
    if problems:
        raise AssemblyError("message grammar violation: " + "; ".join(problems))
    target_display = draft.target_display()
    if (subset == "irrelevant") != (target_display == ""):
        raise AssemblyError(
            f"subset {subset!r} conflicts with target tools {target_display!r}"
        )
    return DatasetInstance(
        uuid=instance_uuid(draft.question, subset, draft.generator_id, draft.seed),
        subset=subset,
        question=draft.question,
        target_tools=target_display,
        messages=list(trajectory.messages),
        question_quality_assessment=task_assessment.as_dict() if task_assessment else {},
        response_quality_assessment=(
            response_assessment.as_dict() if response_assessment else {}
        ),
        metadata=dict(metadata or {}),
    )


REQUIRED_FIELDS = (
    "uuid",
    "subset",
    "question",
    "target_tools",
    "question_quality_assessment",
    "response_quality_assessment",
    "messages",
    "messages_num_rounds",
    "metadata",
)


def validate_instance_record(rec: dict[str, Any]) -> list[str]:
    problems = [f"missing field: {name}" for name in REQUIRED_FIELDS if name not in rec]
    if problems:
        return problems
    if rec["subset"] not in SUBSETS:
        problems.append(f"unknown subset: {rec['subset']!r}")
    if not isinstance(rec["messages"], list):
        problems.append("messages must be an array")
    elif rec["messages_num_rounds"] != len(rec["messages"]):
        problems.append(
            f"messages_num_rounds {rec['messages_num_rounds']} != {len(rec['messages'])} messages"
        )
    if (rec["subset"] == "irrelevant") != (rec["target_tools"] == ""):
        problems.append("irrelevant subset must pair with empty target_tools (and only then)")
    return problems


def instance_from_record(rec: dict[str, Any]) -> DatasetInstance:
    problems = validate_instance_record(rec)
    if problems:
        raise RecordError("; ".join(problems))
    return DatasetInstance(
        uuid=rec["uuid"],
        subset=rec["subset"],
        question=rec["question"],
        target_tools=rec["target_tools"],
        messages=[message_from_record(m) for m in rec["messages"]],
        question_quality_assessment=rec["question_quality_assessment"],
        response_quality_assessment=rec["response_quality_assessment"],
        metadata=rec["metadata"],
    )


def to_export_record(rec: dict[str, Any]) -> dict[str, Any]:
    """Interchange form: nested blocks carried as JSON strings."""
    out = dict(rec)
    for key in ("question_quality_assessment", "response_quality_assessment", "metadata"):
        out[key] = json.dumps(rec[key], ensure_ascii=False)
    out["messages"] = json.dumps(rec["messages"], ensure_ascii=False)
    return out


def dumps_record(rec: dict[str, Any]) -> str:
    return json.dumps(rec, ensure_ascii=False, separators=(",", ":"))


def write_records(path: str | Path, records: Iterable[dict[str, Any]]) -> int:
    """Write JSONL atomically: temp file in the same directory, then rename."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    count = 0
    with tmp.open("w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(dumps_record(rec))
            fh.write("\n")
            count += 1
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)
    return count


def read_records(path: str | Path) -> Iterator[dict[str, Any]]:
    """Yield one record per line; malformed lines (including a truncated
    final line) name the file and line number."""
    path = Path(path)
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped:
                continue
            try:
                rec = json.loads(stripped)
            except ValueError as exc:
                raise RecordError(f"malformed record at {path}:{lineno}: {exc}") from None
            if not isinstance(rec, dict):
                raise RecordError(f"malformed record at {path}:{lineno}: not an object")
            yield rec


@dataclass
class StatsReport:
    instance_count: int
    subsets: dict[str, int]
    servers_per_instance: dict[int, int]
    target_tools_per_instance: dict[int, int]
    context_tools_per_instance: dict[int, int]
    question_token_length: dict[int, int]
    rounds_per_instance: dict[int, int]
    call_pattern: dict[str, int]  # none | single | parallel, one bucket per instance

    def histograms(self) -> dict[str, dict]:
        return {
            "subsets": self.subsets,
            "servers_per_instance": self.servers_per_instance,
            "target_tools_per_instance": self.target_tools_per_instance,
            "context_tools_per_instance": self.context_tools_per_instance,
            "question_token_length": self.question_token_length,
            "rounds_per_instance": self.rounds_per_instance,
            "call_pattern": self.call_pattern,
        }

    def as_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"instance_count": self.instance_count}
        for name, hist in self.histograms().items():
            out[name] = {str(k): v for k, v in sorted(hist.items(), key=lambda kv: str(kv[0]))}
        return out


def compute_stats(
    instances: Iterable[DatasetInstance],
    tokenizer: Callable[[str], list[str]] = str.split,
) -> StatsReport:
    """Histogram the corpus; every histogram's mass equals the instance count."""
    subsets: Counter = Counter()
    servers: Counter = Counter()
    targets: Counter = Counter()
    context_tools: Counter = Counter()
    tokens: Counter = Counter()
    rounds: Counter = Counter()
    pattern: Counter = Counter()
    count = 0
    for inst in instances:
        count += 1
        subsets[inst.subset] += 1
        snapshot = inst.metadata.get("server_specs") or []
        servers[len(snapshot)] += 1
        context_tools[sum(len(entry.get("tools", [])) for entry in snapshot)] += 1
        targets[len([t for t in inst.target_tools.split(", ") if t])] += 1
        tokens[len(tokenizer(inst.question))] += 1
        rounds[inst.messages_num_rounds] += 1
        views = assistant_turn_views(inst.messages)
        calls = [v.call_count for v in views]
        if any(c >= 2 for c in calls):
            pattern["parallel"] += 1
        elif any(c == 1 for c in calls):
            pattern["single"] += 1
        else:
            pattern["none"] += 1
    return StatsReport(
        instance_count=count,
        subsets=dict(subsets),
        servers_per_instance=dict(servers),
        target_tools_per_instance=dict(targets),
        context_tools_per_instance=dict(context_tools),
        question_token_length=dict(tokens),
        rounds_per_instance=dict(rounds),
        call_pattern=dict(pattern),
    )


def render_stats_table(report: StatsReport) -> str:
    lines = [f"instances: {report.instance_count}"]
    for name, hist in report.histograms().items():
        lines.append("")
        lines.append(f"{name}:")
        for key in sorted(hist, key=str):
            lines.append(f"  {key}: {hist[key]}")
    return "\n".join(lines)


def _scores_of(block: dict[str, Any]) -> dict[str, int]:
    out: dict[str, int] = {}
    for dim, entry in block.items():
        if isinstance(entry, dict) and "score" in entry:
            out[dim] = int(entry["score"])
    return out


def select_sft(
    instances: list[DatasetInstance], policy: PolicyConfig | None = None
) -> tuple[list[DatasetInstance], dict[str, int]]:
    """Apply the fine-tuning predicate; returns (selected, subset mixture)."""
    policy = policy or PolicyConfig()
    selected: list[DatasetInstance] = []
    mixture: Counter = Counter()
    for inst in instances:
        pct = inst.response_quality_assessment.get("desired_tools_used_percentage", 0.0)
        if sft_select(
            _scores_of(inst.question_quality_assessment),
            _scores_of(inst.response_quality_assessment),
            float(pct),
            policy,
        ):
            selected.append(inst)
            mixture[inst.subset] += 1
    return selected, dict(mixture)
