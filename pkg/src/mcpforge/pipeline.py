"""Pipeline orchestration.

Eight stages, each reading the previous stage's artifact and writing its own,
all under one run directory with a manifest that records counts and pins the
configuration hash. Every write is atomic, output files carry no timestamps,
and item order in every artifact is a function of the inputs alone, so two
runs from the same configuration and seed produce identical bytes.

Stage artifacts:
  onboard               onboarding.json
  synthesize            tasks.jsonl
  filter-tasks          tasks_filtered.jsonl
  generate              trajectories.jsonl   (journals to trajectories.partial.jsonl)
  filter-trajectories   trajectories_kept.jsonl
  extend                extended.jsonl
  export                dataset.jsonl, dataset_strings.jsonl, sft.jsonl
  stats                 stats.json, stats.txt
"""
from __future__ import annotations

import hashlib
import json
import os
import random
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

from . import dataset_io, judge, traj_filter
from .agent_runtime import Trajectory, bind_tools, check_message_grammar, run_episode
from .config import BackendConfig, PipelineConfig, config_hash
from .dataset_io import (
    DatasetInstance,
    assemble_instance,
    message_from_record,
    message_to_record,
    read_records,
    write_records,
)
from .extensions import (
    ExtensionError,
    diversify,
    make_irrelevant,
    run_followups,
    run_multiturn,
    split_multiturn,
)
from .gateway import (
    BackendProfile,
    ChatMessage,
    Gateway,
    GatewayError,
    HttpChatBackend,
    SamplingParams,
)
from .judge import JudgeError, annotate_response, annotate_task, task_keep
from .mcp_client import McpError, connect
from .mockbed import DEMO_BACKENDS, ScriptedChatBackend, load_script
from .registry import (
    AnnotationError,
    Registry,
    SamplingError,
    ServerSpec,
    SpecError,
    annotate_category,
    onboarding_filter,
    parse_server_spec,
    probe_server,
    spec_from_record,
)
from .task_synth import (
    DraftRejected,
    TaskDraft,
    render_server_descriptions,
    synth_featured,
    synth_multi,
    synth_single,
)
from .traj_filter import evaluate_rules, retain, scan_text

STAGES = (
    "onboard",
    "synthesize",
    "filter-tasks",
    "generate",
    "filter-trajectories",
    "extend",
    "export",
    "stats",
)

ARTIFACTS = {
    "onboard": "onboarding.json",
    "synthesize": "tasks.jsonl",
    "filter-tasks": "tasks_filtered.jsonl",
    "generate": "trajectories.jsonl",
    "filter-trajectories": "trajectories_kept.jsonl",
    "extend": "extended.jsonl",
    "export": "dataset.jsonl",
    "stats": "stats.json",
}

MANIFEST_NAME = "manifest.json"

# judged irrelevance drafts have no intended tool; the judge prompt still
# needs something readable in that slot
NO_TOOL_MARKER = "(none)"


class PipelineError(RuntimeError):
    pass


class ResumeError(PipelineError):
    pass


def derive_seed(seed: int, *labels: Any) -> int:
    key = json.dumps([seed, *labels], separators=(",", ":"), default=str)
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def substream(seed: int, *labels: Any) -> random.Random:
    return random.Random(derive_seed(seed, *labels))


def _atomic_write_json(path: Path, payload: Any) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(
        json.dumps(payload, ensure_ascii=False, indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )
    os.replace(tmp, path)


def _atomic_write_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def _flatten(doc: Any, prefix: str = "") -> dict[str, Any]:
    out: dict[str, Any] = {}
    if isinstance(doc, dict):
        for key, value in doc.items():
            out.update(_flatten(value, f"{prefix}{key}."))
    elif isinstance(doc, (list, tuple)):
        # tuples appear in fresh dataclass snapshots, lists in reloaded JSON;
        # normalize so the two sides compare equal
        out[prefix.rstrip(".")] = json.dumps(list(doc), sort_keys=True, default=str)
    else:
        out[prefix.rstrip(".")] = doc
    return out


def diff_config(old: dict[str, Any], new: dict[str, Any]) -> list[str]:
    """Dotted keys whose values differ between two config snapshots."""
    flat_old, flat_new = _flatten(old), _flatten(new)
    changed = []
    for key in sorted(set(flat_old) | set(flat_new)):
        if flat_old.get(key) != flat_new.get(key):
            changed.append(key)
    return changed


def _config_snapshot(cfg: PipelineConfig) -> dict[str, Any]:
    from dataclasses import asdict

    doc = asdict(cfg)
    doc.pop("run_dir", None)
    doc.pop("workers", None)
    return doc


class RunManifest:
    """Per-run ledger: config hash, per-stage counts, model usage."""

    def __init__(self, data: dict[str, Any]):
        self.data = data

    @classmethod
    def open(cls, cfg: PipelineConfig) -> "RunManifest":
        """Load the run's manifest, or create one pinned to this config.

        A manifest written by a different configuration is refused with the
        list of differing keys; point the run at a fresh directory instead.
        """
        run_dir = Path(cfg.run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        path = run_dir / MANIFEST_NAME
        digest = config_hash(cfg)
        if path.exists():
            data = json.loads(path.read_text(encoding="utf-8"))
            if data.get("config_hash") != digest:
                changed = diff_config(data.get("config", {}), _config_snapshot(cfg))
                raise ResumeError(
                    f"run directory {run_dir} was created by a different configuration; "
                    f"differing keys: {', '.join(changed) or '(snapshot missing)'}"
                )
            return cls(data)
        data = {
            "config_hash": digest,
            "config": _config_snapshot(cfg),
            "seed": cfg.seed,
            "stages": {},
            "usage": {},
        }
        manifest = cls(data)
        manifest.save(cfg)
        return manifest

    def save(self, cfg: PipelineConfig) -> None:
        _atomic_write_json(Path(cfg.run_dir) / MANIFEST_NAME, self.data)

    def stage_done(self, name: str) -> bool:
        return bool(self.data["stages"].get(name, {}).get("complete"))

    def record_stage(
        self,
        cfg: PipelineConfig,
        name: str,
        input_count: int,
        kept: int,
        dropped: dict[str, int],
        extra: dict[str, Any] | None = None,
    ) -> None:
        if kept + sum(dropped.values()) != input_count:
            raise PipelineError(
                f"stage {name}: kept {kept} + dropped {sum(dropped.values())} "
                f"!= input {input_count}"
            )
        entry: dict[str, Any] = {
            "input": input_count,
            "kept": kept,
            "dropped": {k: dropped[k] for k in sorted(dropped)},
            "artifact": ARTIFACTS[name],
            "complete": True,
        }
        if extra:
            entry.update(extra)
        self.data["stages"][name] = entry
        self.save(cfg)

    def record_usage(self, cfg: PipelineConfig, stage: str, gateway: Gateway) -> None:
        report = gateway.usage_report()
        if report:
            self.data["usage"][stage] = report
            self.save(cfg)


# ---------------------------------------------------------------------------
# Backend and session construction.
# ---------------------------------------------------------------------------


def build_backend(bc: BackendConfig) -> Any:
    profile = BackendProfile(
        id=bc.id,
        model=bc.model or bc.id,
        role=bc.role,
        endpoint=bc.endpoint,
        params=SamplingParams(
            temperature=bc.temperature, top_p=bc.top_p, max_tokens=bc.max_tokens
        ),
        rate_limit=bc.rate_limit,
        api_key_env=bc.api_key_env or None,
    )
    if bc.kind == "http":
        api_key = os.environ.get(bc.api_key_env) if bc.api_key_env else None
        return HttpChatBackend(profile, api_key=api_key)
    if bc.kind == "scripted":
        return ScriptedChatBackend(profile, load_script(bc.script))
    if bc.kind in DEMO_BACKENDS:
        return DEMO_BACKENDS[bc.kind](profile)
    raise PipelineError(f"backend {bc.id!r}: unknown kind {bc.kind!r}")


@dataclass
class Runtime:
    """Constructed backends plus the gateway that fronts them."""

    cfg: PipelineConfig
    gateway: Gateway = field(default_factory=Gateway)
    backends: dict[str, Any] = field(default_factory=dict)

    @classmethod
    def from_config(cls, cfg: PipelineConfig) -> "Runtime":
        runtime = cls(cfg=cfg)
        for bc in cfg.backends:
            runtime.backends[bc.id] = build_backend(bc)
        return runtime

    def backend_for(self, role: str) -> Any:
        for bc in self.cfg.backends:
            if bc.role == role:
                return self.backends[bc.id]
        raise PipelineError(f"no backend configured for role {role!r}")

    def open_sessions(self, servers: list[ServerSpec]) -> dict[str, Any]:
        """Connect to each server; unreachable ones are simply absent, which
        the episode runner reports as a connect_error outcome."""
        sessions: dict[str, Any] = {}
        for spec in servers:
            try:
                sessions[spec.qualified_name] = connect(
                    spec.endpoint_url, timeout=self.cfg.policy.tool_timeout
                )
            except McpError:
                continue
        return sessions

    @staticmethod
    def close_sessions(sessions: dict[str, Any]) -> None:
        for session in sessions.values():
            try:
                session.close()
            except Exception:
                pass


# ---------------------------------------------------------------------------
# Record shapes shared between stages.
# ---------------------------------------------------------------------------


def draft_to_record(draft: TaskDraft) -> dict[str, Any]:
    return {
        "question": draft.question,
        "target_tools": list(draft.target_tools),
        "context_servers": [s.qualified_name for s in draft.context_servers],
        "strategy": draft.strategy,
        "seed": draft.seed,
        "generator_id": draft.generator_id,
        "analysis": draft.analysis,
        "parent_question": draft.parent_question,
        "metadata": dict(draft.metadata),
    }


def draft_from_record(rec: dict[str, Any], registry: Registry) -> TaskDraft:
    try:
        servers = [registry.get(name) for name in rec["context_servers"]]
    except KeyError as exc:
        raise PipelineError(f"draft references unknown server {exc.args[0]!r}") from None
    return TaskDraft(
        question=rec["question"],
        target_tools=list(rec["target_tools"]),
        context_servers=servers,
        strategy=rec["strategy"],
        seed=rec["seed"],
        generator_id=rec.get("generator_id", ""),
        analysis=rec.get("analysis", ""),
        parent_question=rec.get("parent_question", ""),
        metadata=dict(rec.get("metadata", {})),
    )


def trajectory_to_record(traj: Trajectory) -> dict[str, Any]:
    return {
        "messages": [message_to_record(m) for m in traj.messages],
        "outcome": traj.outcome,
        "tool_call_count": traj.tool_call_count,
        "assistant_turns": traj.assistant_turns,
        "parallel_call_turns": traj.parallel_call_turns,
    }


def trajectory_from_record(rec: dict[str, Any]) -> Trajectory:
    return Trajectory(
        messages=[message_from_record(m) for m in rec["messages"]],
        outcome=rec["outcome"],
        tool_call_count=rec["tool_call_count"],
        assistant_turns=rec["assistant_turns"],
        parallel_call_turns=rec["parallel_call_turns"],
    )


def _artifact(cfg: PipelineConfig, stage: str) -> Path:
    return Path(cfg.run_dir) / ARTIFACTS[stage]


def _require_artifact(cfg: PipelineConfig, stage: str) -> Path:
    path = _artifact(cfg, stage)
    if not path.exists():
        raise PipelineError(
            f"missing {path.name}; run the {stage!r} stage first"
        )
    return path


def _load_registry(cfg: PipelineConfig) -> Registry:
    doc = json.loads(_require_artifact(cfg, "onboard").read_text(encoding="utf-8"))
    specs = [spec_from_record(rec) for rec in doc["servers"]]
    return Registry(specs, featured=cfg.featured)


# ---------------------------------------------------------------------------
# Stage 1: onboarding.
# ---------------------------------------------------------------------------


def _load_spec_documents(cfg: PipelineConfig) -> list[tuple[str, dict[str, Any]]]:
    spec_dir = Path(cfg.spec_dir)
    if not cfg.spec_dir or not spec_dir.is_dir():
        raise PipelineError(f"spec_dir is not a directory: {cfg.spec_dir!r}")
    docs: list[tuple[str, dict[str, Any]]] = []
    for path in sorted(spec_dir.glob("*.json")):
        loaded = json.loads(path.read_text(encoding="utf-8"))
        entries = loaded if isinstance(loaded, list) else [loaded]
        for entry in entries:
            docs.append((path.name, entry))
    return docs


def stage_onboard(cfg: PipelineConfig, runtime: Runtime) -> None:
    manifest = RunManifest.open(cfg)
    docs = _load_spec_documents(cfg)
    dropped: dict[str, int] = {}
    rejected_records: list[dict[str, Any]] = []

    def drop(reason: str) -> None:
        dropped[reason] = dropped.get(reason, 0) + 1

    specs: list[ServerSpec] = []
    for filename, doc in docs:
        try:
            specs.append(parse_server_spec(doc))
        except SpecError as exc:
            drop("spec")
            rejected_records.append({"server": filename, "reasons": [f"spec:{exc}"]})

    retained, rejected = onboarding_filter(specs)
    for spec, reasons in rejected:
        for prefix in sorted({r.split(":", 1)[0] for r in reasons}):
            drop(prefix)
            break  # one drop bucket per server; full reasons kept below
        rejected_records.append({"server": spec.qualified_name, "reasons": reasons})

    healthy: list[ServerSpec] = []
    health_reports = []
    for spec in retained:
        report = probe_server(
            spec,
            lambda s: connect(s.endpoint_url, timeout=cfg.policy.probe_timeout),
            timeout=cfg.policy.probe_timeout,
        )
        health_reports.append(report.as_dict())
        if report.healthy:
            healthy.append(spec)
        else:
            drop("health")
            rejected_records.append(
                {
                    "server": spec.qualified_name,
                    "reasons": [f"health:{name}: {why}" for name, why in sorted(report.failures.items())],
                }
            )

    generator = runtime.backend_for("task_generator")
    annotated: list[ServerSpec] = []
    for spec in healthy:
        try:
            spec.category = annotate_category(spec, runtime.gateway, generator)
        except (AnnotationError, GatewayError) as exc:
            drop("annotation")
            rejected_records.append(
                {"server": spec.qualified_name, "reasons": [f"annotation:{exc}"]}
            )
            continue
        annotated.append(spec)

    for name in cfg.featured:
        if name not in {s.qualified_name for s in annotated}:
            raise PipelineError(f"featured server {name!r} did not survive onboarding")

    payload = {
        "servers": [spec.as_dict() for spec in annotated],
        "rejected": sorted(rejected_records, key=lambda r: r["server"]),
        "health": sorted(health_reports, key=lambda r: r["server"]),
    }
    _atomic_write_json(_artifact(cfg, "onboard"), payload)
    manifest.record_stage(cfg, "onboard", len(docs), len(annotated), dropped)
    manifest.record_usage(cfg, "onboard", runtime.gateway)


# ---------------------------------------------------------------------------
# Stage 2: task synthesis.
# ---------------------------------------------------------------------------


def allocate_mixture(total: int, mixture: dict[str, float]) -> dict[str, int]:
    """Largest-remainder allocation of task counts to strategies."""
    weights = {k: v for k, v in mixture.items() if v > 0}
    scale = sum(weights.values())
    shares = {k: total * v / scale for k, v in weights.items()}
    counts = {k: int(share) for k, share in shares.items()}
    leftover = total - sum(counts.values())
    by_remainder = sorted(
        weights, key=lambda k: (-(shares[k] - counts[k]), k)
    )
    for k in by_remainder[:leftover]:
        counts[k] += 1
    return counts


def stage_synthesize(cfg: PipelineConfig, runtime: Runtime) -> None:
    manifest = RunManifest.open(cfg)
    registry = _load_registry(cfg)
    generator = runtime.backend_for("task_generator")
    policy = cfg.policy

    allocation = allocate_mixture(cfg.tasks, cfg.mixture)
    if not registry.featured_specs() and allocation.get("featured"):
        # nothing is featured: fold that share back into plain single-server
        allocation["single"] = allocation.get("single", 0) + allocation.pop("featured")

    dropped: dict[str, int] = {}
    records: list[dict[str, Any]] = []

    def drop(reason: str) -> None:
        dropped[reason] = dropped.get(reason, 0) + 1

    for strategy in sorted(allocation):
        for i in range(allocation[strategy]):
            rng = substream(cfg.seed, "synthesize", strategy, i)
            seed = derive_seed(cfg.seed, "draft", strategy, i)
            try:
                if strategy == "single":
                    server = registry.sample_selection("single", 1, rng)[0]
                    k = rng.randint(1, min(policy.max_tools, len(server.tools)))
                    draft = synth_single(server, k, runtime.gateway, generator, policy, seed)
                elif strategy == "featured":
                    selection = registry.sample_selection("featured", 0, rng)
                    k = rng.randint(2, policy.max_tools)
                    draft = synth_featured(
                        selection, k, runtime.gateway, generator, policy, seed
                    )
                else:
                    k = rng.randint(2, policy.max_tools)
                    selection = registry.sample_selection(strategy, k, rng)
                    draft = synth_multi(
                        selection, k, runtime.gateway, generator, policy, seed
                    )
            except SamplingError:
                drop("sampling")
                continue
            except (DraftRejected, GatewayError):
                drop("rejected")
                continue
            if scan_text(draft.question):
                drop("content_scan")
                continue
            draft.metadata["sampling"] = strategy
            records.append(draft_to_record(draft))

    write_records(_artifact(cfg, "synthesize"), records)
    manifest.record_stage(cfg, "synthesize", cfg.tasks, len(records), dropped)
    manifest.record_usage(cfg, "synthesize", runtime.gateway)


# ---------------------------------------------------------------------------
# Stage 3: task filtering.
# ---------------------------------------------------------------------------


def _judge_task(
    draft: TaskDraft, runtime: Runtime
) -> judge.TaskAssessment:
    intended = draft.target_display() or NO_TOOL_MARKER
    return annotate_task(
        draft.question,
        intended,
        render_server_descriptions(draft.context_servers),
        runtime.gateway,
        runtime.backend_for("judge"),
        runtime.cfg.policy,
    )


def stage_filter_tasks(cfg: PipelineConfig, runtime: Runtime) -> None:
    manifest = RunManifest.open(cfg)
    registry = _load_registry(cfg)
    records = list(read_records(_require_artifact(cfg, "synthesize")))
    dropped: dict[str, int] = {}
    kept: list[dict[str, Any]] = []
    for rec in records:
        draft = draft_from_record(rec, registry)
        try:
            assessment = _judge_task(draft, runtime)
        except (JudgeError, GatewayError):
            dropped["judge_error"] = dropped.get("judge_error", 0) + 1
            continue
        if not task_keep(assessment, cfg.policy):
            dropped["quality"] = dropped.get("quality", 0) + 1
            continue
        kept.append({"draft": rec, "task_assessment": assessment.as_dict()})
    write_records(_artifact(cfg, "filter-tasks"), kept)
    manifest.record_stage(cfg, "filter-tasks", len(records), len(kept), dropped)
    manifest.record_usage(cfg, "filter-tasks", runtime.gateway)


# ---------------------------------------------------------------------------
# Stage 4: trajectory generation.
# ---------------------------------------------------------------------------


def _episode(draft: TaskDraft, runtime: Runtime, question: str | None = None) -> Trajectory:
    tools = bind_tools(draft.context_servers)
    sessions = runtime.open_sessions(draft.context_servers)
    try:
        prefix = [ChatMessage(role="user", content=question or draft.question)]
        return run_episode(
            prefix,
            tools,
            sessions,
            runtime.gateway,
            runtime.backend_for("trajectory"),
            runtime.cfg.policy,
        )
    finally:
        Runtime.close_sessions(sessions)


def stage_generate(cfg: PipelineConfig, runtime: Runtime, resume: bool = False) -> None:
    manifest = RunManifest.open(cfg)
    registry = _load_registry(cfg)
    items = list(read_records(_require_artifact(cfg, "filter-tasks")))
    journal_path = Path(cfg.run_dir) / "trajectories.partial.jsonl"

    done: dict[int, dict[str, Any]] = {}
    if resume and journal_path.exists():
        for rec in read_records(journal_path):
            done[rec["index"]] = rec

    lock = threading.Lock()
    journal = journal_path.open("a", encoding="utf-8")

    def work(index: int, item: dict[str, Any]) -> dict[str, Any]:
        if index in done:
            return done[index]
        draft = draft_from_record(item["draft"], registry)
        trajectory = _episode(draft, runtime)
        rec = {
            "index": index,
            "draft": item["draft"],
            "task_assessment": item["task_assessment"],
            "trajectory": trajectory_to_record(trajectory),
        }
        with lock:
            journal.write(dataset_io.dumps_record(rec) + "\n")
            journal.flush()
        return rec

    try:
        if cfg.workers > 1:
            with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
                results = list(pool.map(lambda pair: work(*pair), enumerate(items)))
        else:
            results = [work(i, item) for i, item in enumerate(items)]
    finally:
        journal.close()

    results.sort(key=lambda rec: rec["index"])
    for rec in results:
        rec.pop("index", None)
    write_records(_artifact(cfg, "generate"), results)
    journal_path.unlink(missing_ok=True)
    manifest.record_stage(cfg, "generate", len(items), len(results), {})
    manifest.record_usage(cfg, "generate", runtime.gateway)


# ---------------------------------------------------------------------------
# Stage 5: trajectory filtering.
# ---------------------------------------------------------------------------


def _filter_one(
    draft: TaskDraft,
    trajectory: Trajectory,
    subset: str,
    runtime: Runtime,
) -> tuple[bool, str, dict[str, Any] | None, judge.ResponseAssessment | None]:
    """Returns (keep, drop_reason, verdict_dict, response_assessment)."""
    policy = runtime.cfg.policy
    verdict = evaluate_rules(trajectory, subset=subset, policy=policy)
    if verdict.violations:
        return False, f"rule:{verdict.violations[0]}", verdict.as_dict(), None
    grammar = check_message_grammar(trajectory.messages)
    if grammar:
        return False, "grammar", verdict.as_dict(), None
    intended = draft.target_display() or NO_TOOL_MARKER
    try:
        assessment = annotate_response(
            draft.question,
            intended,
            trajectory,
            draft.target_tools,
            runtime.gateway,
            runtime.backend_for("judge"),
            policy,
        )
    except (JudgeError, GatewayError):
        return False, "judge_error", verdict.as_dict(), None
    if not retain(verdict, assessment, subset=subset, policy=policy):
        return False, "retain", verdict.as_dict(), assessment
    return True, "", verdict.as_dict(), assessment


def stage_filter_trajectories(cfg: PipelineConfig, runtime: Runtime) -> None:
    manifest = RunManifest.open(cfg)
    registry = _load_registry(cfg)
    records = list(read_records(_require_artifact(cfg, "generate")))
    dropped: dict[str, int] = {}
    kept: list[dict[str, Any]] = []
    for rec in records:
        draft = draft_from_record(rec["draft"], registry)
        trajectory = trajectory_from_record(rec["trajectory"])
        subset = dataset_io.subset_for_strategy(draft.strategy)
        ok, reason, verdict, assessment = _filter_one(draft, trajectory, subset, runtime)
        if not ok:
            dropped[reason] = dropped.get(reason, 0) + 1
            continue
        kept.append(
            {
                "draft": rec["draft"],
                "task_assessment": rec["task_assessment"],
                "trajectory": rec["trajectory"],
                "rule_verdict": verdict,
                "response_assessment": assessment.as_dict() if assessment else {},
            }
        )
    write_records(_artifact(cfg, "filter-trajectories"), kept)
    manifest.record_stage(cfg, "filter-trajectories", len(records), len(kept), dropped)
    manifest.record_usage(cfg, "filter-trajectories", runtime.gateway)


# ---------------------------------------------------------------------------
# Stage 6: extensions.
# ---------------------------------------------------------------------------


def _extension_item(
    kind: str,
    subset: str,
    draft: TaskDraft,
    trajectory: Trajectory,
    task_assessment: judge.TaskAssessment | None,
    runtime: Runtime,
) -> tuple[dict[str, Any] | None, str]:
    """Filter one extension episode exactly like stage 5 and shape its record."""
    ok, reason, verdict, response = _filter_one(draft, trajectory, subset, runtime)
    if not ok:
        return None, reason
    return (
        {
            "kind": kind,
            "subset": subset,
            "draft": draft_to_record(draft),
            "task_assessment": task_assessment.as_dict() if task_assessment else {},
            "trajectory": trajectory_to_record(trajectory),
            "rule_verdict": verdict,
            "response_assessment": response.as_dict() if response else {},
        },
        "",
    )


def stage_extend(cfg: PipelineConfig, runtime: Runtime) -> None:
    manifest = RunManifest.open(cfg)
    registry = _load_registry(cfg)
    policy = cfg.policy
    generator = runtime.backend_for("task_generator")
    trajectory_backend = runtime.backend_for("trajectory")
    base_records = list(read_records(_require_artifact(cfg, "filter-trajectories")))
    pool = [draft_from_record(rec["draft"], registry) for rec in base_records]

    dropped: dict[str, int] = {}
    out: list[dict[str, Any]] = []
    attempts = 0

    def drop(reason: str) -> None:
        dropped[reason] = dropped.get(reason, 0) + 1

    def admit(
        kind: str,
        subset: str,
        draft: TaskDraft,
        trajectory: Trajectory,
        assessment: judge.TaskAssessment | None,
    ) -> None:
        nonlocal attempts
        attempts += 1
        record, reason = _extension_item(kind, subset, draft, trajectory, assessment, runtime)
        if record is None:
            drop(f"{kind}:{reason}")
        else:
            out.append(record)

    if cfg.extensions.get("irrelevant") and len(pool) >= 2:
        rng = substream(cfg.seed, "extend", "irrelevant")
        drafts, skipped = make_irrelevant(pool, runtime.gateway, generator, policy, rng)
        for _parent, _reason in skipped:
            attempts += 1
            drop("irrelevant:derange")
        for draft in drafts:
            try:
                assessment = _judge_task(draft, runtime)
            except (JudgeError, GatewayError):
                attempts += 1
                drop("irrelevant:judge_error")
                continue
            if not task_keep(assessment, policy):
                attempts += 1
                drop("irrelevant:quality")
                continue
            admit("irrelevant", "irrelevant", draft, _episode(draft, runtime), assessment)

    if cfg.extensions.get("diversify"):
        for draft in pool:
            if draft.strategy not in ("single", "multi", "featured"):
                continue
            mode_rng = substream(cfg.seed, "extend", "diversify", draft.seed)
            mode = "persona" if mode_rng.random() < 0.5 else "constraint"
            try:
                variations = diversify(
                    draft, mode, policy.variation_count, runtime.gateway, generator, policy
                )
            except (ExtensionError, GatewayError):
                attempts += 1
                drop("diversify:generation")
                continue
            for variation in variations:
                try:
                    assessment = _judge_task(variation, runtime)
                except (JudgeError, GatewayError):
                    attempts += 1
                    drop("diversify:judge_error")
                    continue
                if not task_keep(assessment, policy):
                    attempts += 1
                    drop("diversify:quality")
                    continue
                admit(
                    "diversify",
                    "single-turn-diversify",
                    variation,
                    _episode(variation, runtime),
                    assessment,
                )

    if cfg.extensions.get("multiturn"):
        for rec, draft in zip(base_records, pool):
            if draft.strategy not in ("single", "multi", "featured"):
                continue
            if len(draft.target_tools) >= 2:
                try:
                    plan = split_multiturn(draft, runtime.gateway, generator, policy)
                except (ExtensionError, GatewayError):
                    attempts += 1
                    drop("multiturn:split")
                    continue
                tools = bind_tools(draft.context_servers)
                sessions = runtime.open_sessions(draft.context_servers)
                try:
                    trajectory = run_multiturn(
                        plan, tools, sessions, runtime.gateway, trajectory_backend, policy
                    )
                finally:
                    Runtime.close_sessions(sessions)
                assessment = judge.TaskAssessment(
                    scores={
                        dim: judge.DimensionScore(**entry)
                        for dim, entry in rec["task_assessment"].items()
                        if isinstance(entry, dict) and "score" in entry
                    }
                )
                admit("multiturn", "multi-turn", draft, trajectory, assessment)
            elif policy.follow_up_count > 0:
                base = trajectory_from_record(rec["trajectory"])
                if base.outcome != "completed":
                    continue
                tools = bind_tools(draft.context_servers)
                sessions = runtime.open_sessions(draft.context_servers)
                try:
                    extended = run_followups(
                        base,
                        policy.follow_up_count,
                        tools,
                        sessions,
                        runtime.gateway,
                        trajectory_backend,
                        generator,
                        policy,
                    )
                finally:
                    Runtime.close_sessions(sessions)
                if len(extended.messages) == len(base.messages):
                    attempts += 1
                    drop("multiturn:no_follow_up")
                    continue
                assessment = judge.TaskAssessment(
                    scores={
                        dim: judge.DimensionScore(**entry)
                        for dim, entry in rec["task_assessment"].items()
                        if isinstance(entry, dict) and "score" in entry
                    }
                )
                admit("multiturn", "multi-turn", draft, extended, assessment)

    write_records(_artifact(cfg, "extend"), out)
    manifest.record_stage(cfg, "extend", attempts, len(out), dropped)
    manifest.record_usage(cfg, "extend", runtime.gateway)


# ---------------------------------------------------------------------------
# Stage 7: export.
# ---------------------------------------------------------------------------


def _instance_metadata(
    cfg: PipelineConfig, draft: TaskDraft, rec: dict[str, Any]
) -> dict[str, Any]:
    servers = []
    for spec in draft.context_servers:
        servers.append(
            {
                "qualified_name": spec.qualified_name,
                "display_name": spec.display_name,
                "category": spec.category.primary if spec.category else "",
                "tools": [t.name for t in spec.tools],
            }
        )
    meta = {
        "strategy": draft.strategy,
        "sampling": draft.metadata.get("sampling", draft.strategy),
        "seed": draft.seed,
        "generator": draft.generator_id,
        "config_hash": config_hash(cfg),
        "server_specs": servers,
        "outcome": rec["trajectory"]["outcome"],
        "tool_call_count": rec["trajectory"]["tool_call_count"],
        "assistant_turns": rec["trajectory"]["assistant_turns"],
        "parallel_call_turns": rec["trajectory"]["parallel_call_turns"],
    }
    if draft.parent_question:
        meta["parent_question"] = draft.parent_question
    if "parent_targets" in draft.metadata:
        meta["parent_targets"] = list(draft.metadata["parent_targets"])
    return meta


def stage_export(cfg: PipelineConfig, runtime: Runtime) -> None:
    manifest = RunManifest.open(cfg)
    registry = _load_registry(cfg)
    kept = list(read_records(_require_artifact(cfg, "filter-trajectories")))
    extended_path = Path(cfg.run_dir) / ARTIFACTS["extend"]
    extended = list(read_records(extended_path)) if extended_path.exists() else []

    dropped: dict[str, int] = {}
    instances: list[DatasetInstance] = []
    seen: set[str] = set()
    for rec in kept + extended:
        draft = draft_from_record(rec["draft"], registry)
        trajectory = trajectory_from_record(rec["trajectory"])
        subset = rec.get("subset") or dataset_io.subset_for_strategy(draft.strategy)
        task_scores = {
            dim: judge.DimensionScore(**entry)
            for dim, entry in rec.get("task_assessment", {}).items()
            if isinstance(entry, dict) and "score" in entry
        }
        try:
            instance = assemble_instance(
                draft,
                trajectory,
                judge.TaskAssessment(scores=task_scores) if task_scores else None,
                None,
                subset=subset,
                metadata=_instance_metadata(cfg, draft, rec),
            )
        except dataset_io.AssemblyError:
            dropped["assembly"] = dropped.get("assembly", 0) + 1
            continue
        # the response assessment arrives from stage 5 as a plain mapping; attach verbatim
        instance.response_quality_assessment = rec.get("response_assessment", {})
        if instance.uuid in seen:
            dropped["duplicate_uuid"] = dropped.get("duplicate_uuid", 0) + 1
            continue
        seen.add(instance.uuid)
        instances.append(instance)

    records = [inst.to_record() for inst in instances]
    write_records(_artifact(cfg, "export"), records)
    write_records(
        Path(cfg.run_dir) / "dataset_strings.jsonl",
        [dataset_io.to_export_record(rec) for rec in records],
    )
    selected, mixture = dataset_io.select_sft(instances, cfg.policy)
    write_records(
        Path(cfg.run_dir) / "sft.jsonl", [inst.to_record() for inst in selected]
    )
    manifest.record_stage(
        cfg,
        "export",
        len(kept) + len(extended),
        len(instances),
        dropped,
        extra={
            "sft_selected": len(selected),
            "sft_mixture": {k: mixture[k] for k in sorted(mixture)},
        },
    )


# ---------------------------------------------------------------------------
# Stage 8: statistics.
# ---------------------------------------------------------------------------


def stage_stats(cfg: PipelineConfig, runtime: Runtime) -> None:
    manifest = RunManifest.open(cfg)
    records = list(read_records(_require_artifact(cfg, "export")))
    instances = [dataset_io.instance_from_record(rec) for rec in records]
    report = dataset_io.compute_stats(instances)
    _atomic_write_json(_artifact(cfg, "stats"), report.as_dict())
    _atomic_write_text(
        Path(cfg.run_dir) / "stats.txt", dataset_io.render_stats_table(report) + "\n"
    )
    manifest.record_stage(cfg, "stats", len(instances), len(instances), {})


_STAGE_FUNCS: dict[str, Callable[..., None]] = {
    "onboard": stage_onboard,
    "synthesize": stage_synthesize,
    "filter-tasks": stage_filter_tasks,
    "generate": stage_generate,
    "filter-trajectories": stage_filter_trajectories,
    "extend": stage_extend,
    "export": stage_export,
    "stats": stage_stats,
}


def run_stage(
    name: str,
    cfg: PipelineConfig,
    runtime: Runtime | None = None,
    resume: bool = False,
) -> bool:
    """Run one stage; returns False when resume skipped it.

    With resume, a stage the manifest already marks complete (and whose
    artifact still exists) is not re-run."""
    if name not in _STAGE_FUNCS:
        raise PipelineError(f"unknown stage: {name!r}")
    manifest = RunManifest.open(cfg)
    if resume and manifest.stage_done(name) and _artifact(cfg, name).exists():
        return False
    runtime = runtime or Runtime.from_config(cfg)
    if name == "generate":
        stage_generate(cfg, runtime, resume=resume)
    else:
        _STAGE_FUNCS[name](cfg, runtime)
    return True


def run_all(cfg: PipelineConfig, resume: bool = False) -> None:
    # each stage gets a fresh Runtime: backend state and usage counters then
    # depend only on that stage's inputs, so stage-at-a-time CLI runs and a
    # straight-through run produce the same bytes
    for name in STAGES:
        run_stage(name, cfg, resume=resume)
