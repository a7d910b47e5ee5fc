"""Dataset extensions.

Three transformations grow the core single-turn set: irrelevance episodes
(questions paired with deliberately mismatched toolsets, keeping only
zero-call trajectories), diversified rephrasings of existing tasks, and
multi-turn conversations built by splitting tasks into sub-questions or
appending generated follow-ups.
"""
from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Any

from .agent_runtime import (
    BoundTool,
    Trajectory,
    assistant_turn_views,
    run_episode,
)
from .config import PolicyConfig
from .gateway import ChatMessage, TagParseError, TagSpec, extract_tagged, render_prompt
from .judge import render_transcript
from .prompt_library import get_template
from .task_synth import (
    DraftRejected,
    TaskDraft,
    resolve_target,
    synth_featured,
    synth_multi,
    synth_single,
    validate_draft,
)


class ExtensionError(RuntimeError):
    pass


def _sattolo(n: int, rng: random.Random) -> list[int]:
    """Single-cycle permutation of range(n): a derangement for n >= 2."""
    perm = list(range(n))
    for i in range(n - 1, 0, -1):
        j = rng.randrange(i)
        perm[i], perm[j] = perm[j], perm[i]
    return perm


def _context_tool_names(draft: TaskDraft) -> set[str]:
    return {t.name for spec in draft.context_servers for t in spec.tools}


def _regenerate_question(
    parent: TaskDraft,
    gateway: Any,
    backend: Any,
    policy: PolicyConfig,
    seed: int,
) -> TaskDraft:
    k = max(1, len(parent.target_tools))
    if parent.strategy == "multi":
        return synth_multi(parent.context_servers, k, gateway, backend, policy, seed)
    if parent.strategy == "featured":
        return synth_featured(parent.context_servers, k, gateway, backend, policy, seed)
    return synth_single(parent.context_servers[0], k, gateway, backend, policy, seed)


def make_irrelevant(
    pool: list[TaskDraft],
    gateway: Any,
    backend: Any,
    policy: PolicyConfig | None = None,
    rng: random.Random | None = None,
) -> tuple[list[TaskDraft], list[tuple[TaskDraft, str]]]:
    """Build irrelevance drafts by swapping server contexts across the pool.

    Each draft gets a deranged partner whose toolset shares no tool with the
    draft's own targets (bounded resampling otherwise); the question is
    regenerated from the draft's native servers so it stays natural, then
    paired with the partner's context and an empty target list. Returns
    (drafts, skipped-with-reason).
    """
    policy = policy or PolicyConfig()
    rng = rng or random.Random(0)
    if len(pool) < 2:
        raise ExtensionError("irrelevance extension needs at least 2 drafts to swap contexts")
    perm = _sattolo(len(pool), rng)
    out: list[TaskDraft] = []
    skipped: list[tuple[TaskDraft, str]] = []
    for i, parent in enumerate(pool):
        targets = set(parent.bare_targets())
        partner_index = perm[i]
        attempts = 0
        while (
            partner_index == i
            or targets & _context_tool_names(pool[partner_index])
        ):
            attempts += 1
            if attempts > policy.irrelevant_resample_attempts:
                partner_index = -1
                break
            partner_index = rng.randrange(len(pool))
        if partner_index < 0:
            skipped.append((parent, "no disjoint partner after bounded resampling"))
            continue
        partner = pool[partner_index]
        try:
            regenerated = _regenerate_question(
                parent, gateway, backend, policy, seed=parent.seed
            )
        except DraftRejected as exc:
            skipped.append((parent, f"question regeneration failed: {exc}"))
            continue
        out.append(
            TaskDraft(
                question=regenerated.question,
                target_tools=[],
                context_servers=list(partner.context_servers),
                strategy="irrelevant",
                seed=parent.seed,
                generator_id=regenerated.generator_id,
                parent_question=parent.question,
                metadata={"parent_targets": parent.bare_targets()},
            )
        )
    return out, skipped


def _target_tool_descriptions(draft: TaskDraft) -> str:
    lines = []
    for name in draft.target_tools:
        hit = resolve_target(name, draft.context_servers)
        if hit is None:
            lines.append(f"- {name}")
        else:
            lines.append(f"- {hit[1].name}: {hit[1].description}")
    return "\n".join(lines)


def diversify(
    draft: TaskDraft,
    mode: str,
    count: int,
    gateway: Any,
    backend: Any,
    policy: PolicyConfig | None = None,
) -> list[TaskDraft]:
    """Generate question variations that keep the draft's target tools.

    mode "persona" varies who is asking and in what scenario; mode
    "constraint" layers extra requirements on the same task. Variations that
    fail validation are dropped, so the result may hold fewer than count
    entries; the caller decides whether a partial batch is acceptable.
    """
    policy = policy or PolicyConfig()
    if mode not in ("persona", "constraint"):
        raise ExtensionError(f"unknown diversification mode: {mode!r}")
    prompt = render_prompt(
        get_template(f"diversify_{mode}"),
        {
            "ORIGINAL_QUESTION": draft.question,
            "TARGET_TOOLS": draft.target_display(),
            "TOOL_DESCRIPTIONS": _target_tool_descriptions(draft),
            "VARIATIONS_COUNT": str(count),
        },
    )
    turn = gateway.chat(backend, [ChatMessage(role="user", content=prompt)])
    try:
        blocks = extract_tagged(turn.content, [TagSpec("variation_*", repeated=True)])
    except TagParseError as exc:
        raise ExtensionError(f"diversification output unparsable: {exc}") from exc
    variations: list[TaskDraft] = []
    for block in blocks["variation_*"]:
        try:
            inner = extract_tagged(
                f"<variation>{block}</variation>", [TagSpec("question")]
            )
        except TagParseError:
            continue
        candidate = TaskDraft(
            question=inner["question"][0].strip(),
            target_tools=list(draft.target_tools),
            context_servers=list(draft.context_servers),
            strategy=f"diversify-{mode}",
            seed=draft.seed,
            generator_id=getattr(getattr(backend, "profile", None), "id", ""),
            parent_question=draft.question,
        )
        if not validate_draft(candidate, policy):
            variations.append(candidate)
    return variations


@dataclass
class SubQuestion:
    question: str
    tools: list[str]  # bare target names this step needs


@dataclass
class SubQuestionPlan:
    parent: TaskDraft
    steps: list[SubQuestion] = field(default_factory=list)


def split_multiturn(
    draft: TaskDraft,
    gateway: Any,
    backend: Any,
    policy: PolicyConfig | None = None,
) -> SubQuestionPlan:
    """Split a multi-tool task into ordered sub-questions whose tool
    coverage, taken together, equals the draft's target set. One retry, then
    ExtensionError."""
    policy = policy or PolicyConfig()
    if len(draft.target_tools) < 2:
        raise ExtensionError("multi-turn split needs a draft with at least 2 target tools")
    prompt = render_prompt(
        get_template("multiturn_split"),
        {
            "ORIGINAL_QUESTION": draft.question,
            "TARGET_TOOLS": draft.target_display(),
            "TOOL_DESCRIPTIONS": _target_tool_descriptions(draft),
        },
    )
    expected = set(draft.bare_targets())
    last = ""
    for _ in range(2):
        turn = gateway.chat(backend, [ChatMessage(role="user", content=prompt)])
        try:
            blocks = extract_tagged(turn.content, [TagSpec("sub_question_*", repeated=True)])
        except TagParseError as exc:
            last = str(exc)
            continue
        steps: list[SubQuestion] = []
        covered: set[str] = set()
        ok = True
        for block in blocks["sub_question_*"]:
            try:
                inner = extract_tagged(
                    f"<sub_question>{block}</sub_question>",
                    [TagSpec("question"), TagSpec("tools", required=False)],
                )
            except TagParseError as exc:
                last = str(exc)
                ok = False
                break
            tools = []
            if inner.get("tools"):
                tools = [t.strip() for t in inner["tools"][0].split(",") if t.strip()]
            covered.update(tools)
            steps.append(SubQuestion(question=inner["question"][0].strip(), tools=tools))
        if not ok:
            continue
        if len(steps) < 2:
            last = f"split produced {len(steps)} sub-questions, need at least 2"
            continue
        if covered != expected:
            last = (
                f"coverage mismatch: plan covers {sorted(covered)}, targets are {sorted(expected)}"
            )
            continue
        return SubQuestionPlan(parent=draft, steps=steps)
    raise ExtensionError(f"multi-turn split failed: {last}")


def follow_up(messages: list[ChatMessage], gateway: Any, backend: Any) -> str:
    """One generated follow-up user question; empty string means the
    generator declined and the extension is skipped."""
    prompt = render_prompt(
        get_template("follow_up"),
        {"CONVERSATION_HISTORY": render_transcript(messages)},
    )
    turn = gateway.chat(backend, [ChatMessage(role="user", content=prompt)])
    tags = extract_tagged(turn.content, [TagSpec("follow_up_question", required=False)])
    hits = tags.get("follow_up_question") or []
    return hits[0].strip() if hits else ""


def _combined(messages: list[ChatMessage], outcome: str) -> Trajectory:
    views = assistant_turn_views(messages)
    return Trajectory(
        messages=messages,
        outcome=outcome,
        tool_call_count=sum(
            1 for m in messages if m.role == "assistant" and m.function_call is not None
        ),
        assistant_turns=len(views),
        parallel_call_turns=sum(1 for v in views if v.call_count >= 2),
    )


def run_multiturn(
    plan: SubQuestionPlan,
    tools: list[BoundTool],
    sessions: dict[str, Any],
    gateway: Any,
    backend: Any,
    policy: PolicyConfig | None = None,
) -> Trajectory:
    """Drive the sub-questions as sequential user turns in one conversation."""
    policy = policy or PolicyConfig()
    trajectory: Trajectory | None = None
    for step in plan.steps:
        prior = list(trajectory.messages) if trajectory else []
        prefix = prior + [ChatMessage(role="user", content=step.question)]
        trajectory = run_episode(prefix, tools, sessions, gateway, backend, policy)
        if trajectory.outcome != "completed":
            return _combined(trajectory.messages, trajectory.outcome)
    assert trajectory is not None
    return _combined(trajectory.messages, trajectory.outcome)


def run_followups(
    base: Trajectory,
    count: int,
    tools: list[BoundTool],
    sessions: dict[str, Any],
    gateway: Any,
    trajectory_backend: Any,
    generator_backend: Any,
    policy: PolicyConfig | None = None,
) -> Trajectory:
    """Extend a completed trajectory with up to count generated follow-ups."""
    policy = policy or PolicyConfig()
    assert base.outcome == "completed", "follow-ups extend completed trajectories only"
    trajectory = base
    for _ in range(count):
        question = follow_up(trajectory.messages, gateway, generator_backend)
        if not question:
            break
        prefix = list(trajectory.messages) + [ChatMessage(role="user", content=question)]
        trajectory = run_episode(
            prefix, tools, sessions, gateway, trajectory_backend, policy
        )
        if trajectory.outcome != "completed":
            return _combined(trajectory.messages, trajectory.outcome)
    return _combined(trajectory.messages, trajectory.outcome)
