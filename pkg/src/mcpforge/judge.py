"""LLM-as-judge scoring.

Task quality is rated on six dimensions and responses on two, each over a
five-word Likert vocabulary that maps positionally to scores 1..5. Parsing
is tolerant of formatting noise, but an unknown rating word triggers one
re-judge before the item is flagged, never a guessed score.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Any, Mapping

from .config import PolicyConfig
from .gateway import ChatMessage, TagSpec, TagParseError, extract_tagged, render_prompt
from .prompt_library import get_template
from .traj_filter import ToolUseMetrics, tool_use_metrics

VOCABULARIES: dict[str, tuple[str, ...]] = {
    "tool_selection_difficulty": ("very easy", "easy", "medium", "hard", "very hard"),
    "tool_selection_uniqueness": (
        "not unique",
        "somewhat unique",
        "moderately unique",
        "quite unique",
        "highly unique",
    ),
    "question_quality": ("very poor", "poor", "average", "good", "excellent"),
    "scenario_realism": (
        "unrealistic",
        "somewhat unrealistic",
        "moderately realistic",
        "realistic",
        "highly realistic",
    ),
    "verifiable": (
        "hard to verify",
        "somewhat hard",
        "moderately verifiable",
        "mostly verifiable",
        "easy to verify",
    ),
    "stability": (
        "highly unstable",
        "somewhat unstable",
        "moderately stable",
        "mostly stable",
        "highly stable",
    ),
    "completeness": (
        "very incomplete",
        "incomplete",
        "partially complete",
        "mostly complete",
        "fully complete",
    ),
    "conciseness": ("very redundant", "redundant", "average", "concise", "very concise"),
}

TASK_DIMENSIONS = (
    "tool_selection_difficulty",
    "tool_selection_uniqueness",
    "question_quality",
    "scenario_realism",
    "verifiable",
    "stability",
)

RESPONSE_DIMENSIONS = ("completeness", "conciseness")


class JudgeError(RuntimeError):
    pass


class UnknownRating(JudgeError):
    pass


def _normalize_word(word: str) -> str:
    return re.sub(r"\s+", " ", word.strip().strip(".,;:!").lower())


def rating_to_score(dimension: str, word: str) -> int:
    """Positional word-to-score mapping; raises UnknownRating otherwise."""
    vocab = VOCABULARIES.get(dimension)
    if vocab is None:
        raise JudgeError(f"unknown judge dimension: {dimension!r}")
    normalized = _normalize_word(word)
    for i, entry in enumerate(vocab):
        if normalized == entry:
            return i + 1
    raise UnknownRating(f"{dimension}: unknown rating word {word!r}")


def score_to_word(dimension: str, score: int) -> str:
    vocab = VOCABULARIES.get(dimension)
    if vocab is None:
        raise JudgeError(f"unknown judge dimension: {dimension!r}")
    if not 1 <= score <= 5:
        raise ValueError(f"{dimension}: score {score} outside 1..5")
    return vocab[score - 1]


@dataclass
class DimensionScore:
    reasoning: str
    score: int

    def as_dict(self) -> dict[str, Any]:
        return {"reasoning": self.reasoning, "score": self.score}


@dataclass
class TaskAssessment:
    scores: dict[str, DimensionScore]

    def dimension_scores(self) -> dict[str, int]:
        return {dim: ds.score for dim, ds in self.scores.items()}

    @property
    def overall_score(self) -> float:
        return sum(ds.score for ds in self.scores.values()) / len(self.scores)

    def as_dict(self) -> dict[str, Any]:
        rec: dict[str, Any] = {dim: self.scores[dim].as_dict() for dim in TASK_DIMENSIONS}
        rec["overall_score"] = round(self.overall_score, 1)
        return rec


@dataclass
class ResponseAssessment:
    scores: dict[str, DimensionScore]
    metrics: ToolUseMetrics = field(
        default_factory=lambda: ToolUseMetrics(1.0, True, 0, 0)
    )

    def dimension_scores(self) -> dict[str, int]:
        return {dim: ds.score for dim, ds in self.scores.items()}

    @property
    def overall_score(self) -> float:
        return sum(ds.score for ds in self.scores.values()) / len(self.scores)

    def as_dict(self) -> dict[str, Any]:
        rec: dict[str, Any] = {dim: self.scores[dim].as_dict() for dim in RESPONSE_DIMENSIONS}
        rec["overall_score"] = round(self.overall_score, 1)
        rec["desired_tools_used_percentage"] = self.metrics.serialized_percentage()
        rec["order_correctness"] = self.metrics.order_correctness
        return rec


def _parse_dimension_blocks(
    response_text: str, dimensions: tuple[str, ...]
) -> dict[str, DimensionScore]:
    blocks = extract_tagged(response_text, [TagSpec(dim) for dim in dimensions])
    parsed: dict[str, DimensionScore] = {}
    for dim in dimensions:
        block = blocks[dim][0]
        inner = extract_tagged(
            f"<{dim}>{block}</{dim}>",
            [TagSpec("reasoning", required=False), TagSpec("rating")],
        )
        reasoning = inner["reasoning"][0] if inner.get("reasoning") else ""
        parsed[dim] = DimensionScore(
            reasoning=reasoning, score=rating_to_score(dim, inner["rating"][0])
        )
    return parsed


def _judged_dimensions(
    prompt: str,
    dimensions: tuple[str, ...],
    gateway: Any,
    backend: Any,
    retries: int,
) -> dict[str, DimensionScore]:
    last: Exception | None = None
    for _ in range(retries + 1):
        turn = gateway.chat(backend, [ChatMessage(role="user", content=prompt)])
        try:
            return _parse_dimension_blocks(turn.content, dimensions)
        except (UnknownRating, TagParseError) as exc:
            last = exc
    raise JudgeError(f"judging failed after retry: {last}")


def annotate_task(
    question: str,
    intended_tools: str,
    all_tools: str,
    gateway: Any,
    backend: Any,
    policy: PolicyConfig | None = None,
) -> TaskAssessment:
    """Score one task draft on the six quality dimensions."""
    policy = policy or PolicyConfig()
    prompt = render_prompt(
        get_template("task_quality"),
        {
            "ALL_SERVER_AND_TOOL_INFORMATION": all_tools,
            "QUESTION_CONTENT": question,
            "INTENDED_TOOL": intended_tools,
        },
    )
    scores = _judged_dimensions(
        prompt, TASK_DIMENSIONS, gateway, backend, policy.judge_retries
    )
    return TaskAssessment(scores=scores)


def render_transcript(messages: list[ChatMessage]) -> str:
    """Deterministic plain-text rendering of a conversation for judging."""
    import json as _json

    lines: list[str] = []
    for msg in messages:
        if msg.role == "assistant" and msg.function_call is not None:
            call = msg.function_call
            args = call.raw_arguments
            if args is None:
                args = _json.dumps(call.arguments, ensure_ascii=False, sort_keys=True)
            lines.append(f"[assistant] call {call.name} {args}")
            if msg.content:
                lines.append(f"[assistant] {msg.content}")
        elif msg.role == "function":
            label = f"[tool result{f' {msg.name}' if msg.name else ''}]"
            lines.append(f"{label} {msg.content}")
        else:
            lines.append(f"[{msg.role}] {msg.content}")
    return "\n".join(lines)


def annotate_response(
    question: str,
    intended_tools: str,
    trajectory: Any,
    target_tools: list[str],
    gateway: Any,
    backend: Any,
    policy: PolicyConfig | None = None,
) -> ResponseAssessment:
    """Score one trajectory on completeness and conciseness and attach the
    rule-computed tool-use metrics (those are never judged by the model)."""
    policy = policy or PolicyConfig()
    prompt = render_prompt(
        get_template("traj_quality"),
        {
            "QUESTION_CONTENT": question,
            "INTENDED_TOOL": intended_tools,
            "CONVERSATION_HISTORY": render_transcript(trajectory.messages),
        },
    )
    scores = _judged_dimensions(
        prompt, RESPONSE_DIMENSIONS, gateway, backend, policy.judge_retries
    )
    return ResponseAssessment(
        scores=scores, metrics=tool_use_metrics(trajectory, target_tools)
    )


def task_keep(assessment: TaskAssessment, policy: PolicyConfig | None = None) -> bool:
    """Stage-3 gate: per-dimension minimum scores from policy."""
    policy = policy or PolicyConfig()
    scores = assessment.dimension_scores()
    return all(
        scores.get(dim, 0) >= minimum
        for dim, minimum in policy.stage3_thresholds.items()
    )


def sft_select(
    question_scores: Mapping[str, int],
    response_scores: Mapping[str, int],
    tool_use_percentage: float,
    policy: PolicyConfig | None = None,
) -> bool:
    """Fine-tuning selection predicate.

    Perfect question quality and scenario realism, completeness and
    conciseness at 4+, and full desired-tool coverage. Monotone: raising any
    score never flips keep to drop.
    """
    policy = policy or PolicyConfig()
    return (
        question_scores.get("question_quality", 0) >= policy.sft_min_question_quality
        and question_scores.get("scenario_realism", 0) >= policy.sft_min_scenario_realism
        and response_scores.get("completeness", 0) >= policy.sft_min_completeness
        and response_scores.get("conciseness", 0) >= policy.sft_min_conciseness
        and tool_use_percentage >= policy.sft_min_tool_use
    )
