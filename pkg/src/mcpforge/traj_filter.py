"""Rule-based trajectory filtering and tool-use metrics.

Everything here is a pure function of the trajectory content, so verdicts
survive serialization round-trips: error detection rides on standardized
payloads and phrase heuristics, never on hidden in-memory flags.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import Any, Mapping

from .agent_runtime import Trajectory
from .config import PolicyConfig
from .gateway import ChatMessage

VIOLATION_KINDS = (
    "FailedStart",
    "ConnectError",
    "NoToolCalls",
    "ToolResponseFailure",
    "LocalPath",
    "PiiMatch",
)

LOCAL_PATH_PATTERNS: dict[str, re.Pattern[str]] = {
    "unix_path": re.compile(r"(?<![\w./-])/(?:home|Users|tmp|var)/[^\s\"'`]+"),
    "windows_path": re.compile(r"\b[A-Za-z]:\\[^\s\"'`]*"),
}

PII_PATTERNS: dict[str, re.Pattern[str]] = {
    "email": re.compile(r"\b[A-Za-z0-9._%+-]+@[A-Za-z0-9.-]+\.[A-Za-z]{2,}\b"),
    "key_like": re.compile(
        r"(?i)\b(?:api[_-]?key|access[_-]?key|secret|token|passwd|password|bearer)\b"
        r"[\"'\s:=]{0,6}[A-Za-z0-9_\-]{16,}"
    ),
    "credential_url": re.compile(r"\b[a-z][a-z0-9+.-]*://[^\s/@:]+:[^\s@]+@[^\s]+"),
}


@dataclass(frozen=True)
class PatternMatch:
    kind: str
    start: int
    text: str


def scan_text(
    text: str, patterns: Mapping[str, re.Pattern[str]] | None = None
) -> list[PatternMatch]:
    """All pattern hits in deterministic (position, kind) order."""
    if patterns is None:
        patterns = {**LOCAL_PATH_PATTERNS, **PII_PATTERNS}
    hits = [
        PatternMatch(kind=kind, start=m.start(), text=m.group(0))
        for kind, pattern in patterns.items()
        for m in pattern.finditer(text)
    ]
    return sorted(hits, key=lambda h: (h.start, h.kind, h.text))


@dataclass
class ToolUseMetrics:
    """Coverage and ordering of the task's desired tools in a call sequence.

    percentage is the exact fraction of distinct desired tools that were
    called; serialization truncates it to 4 decimals (1/3 -> 0.3333).
    order_correctness means the desired list appears as a subsequence of the
    calls, so order_correctness implies percentage == 1.0.
    """

    percentage: float
    order_correctness: bool
    hit_count: int = 0
    desired_count: int = 0

    def serialized_percentage(self) -> float:
        if self.desired_count == 0:
            return 1.0
        return (self.hit_count * 10000 // self.desired_count) / 10000


def _names_match(call_name: str, desired: str) -> bool:
    # desired names may be bare while calls are server-qualified (or the
    # reverse); a qualified name embeds the bare one behind a dash
    return (
        call_name == desired
        or call_name.endswith(f"-{desired}")
        or desired.endswith(f"-{call_name}")
    )


def trajectory_call_names(trajectory: Trajectory) -> list[str]:
    return [
        m.function_call.name
        for m in trajectory.messages
        if m.role == "assistant" and m.function_call is not None
    ]


def tool_use_metrics(
    trajectory: Trajectory | list[str], target_tools: list[str]
) -> ToolUseMetrics:
    """Compute coverage percentage and order correctness.

    Accepts a trajectory or a plain call-name list. An empty desired set is
    vacuously perfect: nothing was required, so coverage is 1.0 and the empty
    sequence is trivially in order.
    """
    calls = (
        trajectory_call_names(trajectory)
        if isinstance(trajectory, Trajectory)
        else list(trajectory)
    )
    if not target_tools:
        return ToolUseMetrics(
            percentage=1.0, order_correctness=True, hit_count=0, desired_count=0
        )
    distinct = list(dict.fromkeys(target_tools))
    hits = sum(
        1 for desired in distinct if any(_names_match(c, desired) for c in calls)
    )
    # order: the full desired list (duplicates included) must be a subsequence
    pos = 0
    for call in calls:
        if pos < len(target_tools) and _names_match(call, target_tools[pos]):
            pos += 1
    in_order = pos == len(target_tools)
    return ToolUseMetrics(
        percentage=hits / len(distinct),
        order_correctness=in_order,
        hit_count=hits,
        desired_count=len(distinct),
    )


@dataclass
class RuleVerdict:
    violations: list[str] = field(default_factory=list)
    evidence: dict[str, list[str]] = field(default_factory=dict)
    tool_call_count: int = 0
    outcome: str = "completed"

    def as_dict(self) -> dict[str, Any]:
        return {
            "violations": list(self.violations),
            "evidence": {k: list(v) for k, v in sorted(self.evidence.items())},
            "tool_call_count": self.tool_call_count,
            "outcome": self.outcome,
        }


def _error_flagged(content: str, phrases: tuple[str, ...]) -> str | None:
    """Reason text when a function message looks like a failed tool call."""
    stripped = content.strip()
    if stripped.startswith("{"):
        try:
            parsed = json.loads(stripped)
        except ValueError:
            parsed = None
        if isinstance(parsed, dict):
            if parsed.get("error"):
                return "standardized error payload"
            if parsed.get("isError"):
                return "error-flagged result"
    window = content[:200].lower()
    for phrase in phrases:
        if re.search(rf"\b{re.escape(phrase)}\b", window):
            return f"phrase match: {phrase!r}"
    return None


def evaluate_rules(
    trajectory: Trajectory,
    subset: str = "single-turn-original",
    policy: PolicyConfig | None = None,
    patterns: Mapping[str, re.Pattern[str]] | None = None,
) -> RuleVerdict:
    """Apply the rule checks to one trajectory.

    Violations: FailedStart / ConnectError from the episode outcome,
    NoToolCalls (suppressed for the irrelevance subset), ToolResponseFailure
    from the error heuristics, LocalPath / PiiMatch from content scans over
    every message.
    """
    policy = policy or PolicyConfig()
    verdict = RuleVerdict(tool_call_count=trajectory.tool_call_count, outcome=trajectory.outcome)

    def add(kind: str, item: str) -> None:
        if kind not in verdict.violations:
            verdict.violations.append(kind)
        verdict.evidence.setdefault(kind, []).append(item)

    if trajectory.outcome == "failed_start":
        add("FailedStart", "episode failed to start")
    elif trajectory.outcome == "connect_error":
        add("ConnectError", "server session could not be established")
    if trajectory.tool_call_count == 0 and subset != "irrelevant":
        add("NoToolCalls", "trajectory contains no tool calls")
    for i, msg in enumerate(trajectory.messages):
        if msg.role == "function":
            reason = _error_flagged(msg.content, tuple(policy.error_phrases))
            if reason:
                add("ToolResponseFailure", f"message {i}: {reason}")
        for hit in scan_text(msg.content, patterns):
            kind = "LocalPath" if hit.kind in LOCAL_PATH_PATTERNS else "PiiMatch"
            add(kind, f"message {i} at {hit.start}: {hit.text[:80]}")
    return verdict


def _dimension_scores(assessment: Any) -> dict[str, int]:
    if assessment is None:
        return {}
    if isinstance(assessment, Mapping):
        return {k: int(v) for k, v in assessment.items()}
    return assessment.dimension_scores()


def retain(
    verdict: RuleVerdict,
    assessment: Any,
    subset: str = "single-turn-original",
    policy: PolicyConfig | None = None,
) -> bool:
    """Final keep/drop for one trajectory.

    False on any rule violation; otherwise the judge-score minima from
    policy.stage5_thresholds must hold, and the irrelevance subset
    additionally requires a zero tool-call trajectory.
    """
    policy = policy or PolicyConfig()
    if verdict.violations:
        return False
    scores = _dimension_scores(assessment)
    for dimension, minimum in policy.stage5_thresholds.items():
        if scores.get(dimension, 0) < minimum:
            return False
    if subset == "irrelevant" and verdict.tool_call_count != 0:
        return False
    return True


def scan_messages(messages: list[ChatMessage]) -> list[PatternMatch]:
    """Pre-generation hook: scan arbitrary message content (for example a
    draft question) with the default pattern set."""
    hits: list[PatternMatch] = []
    for msg in messages:
        hits.extend(scan_text(msg.content))
    return hits
