import json

import pytest
from hypothesis import given, strategies as st

from mcpforge.agent_runtime import Trajectory
from mcpforge.config import PolicyConfig
from mcpforge.dataset_io import (
    REQUIRED_FIELDS,
    SUBSETS,
    AssemblyError,
    DatasetInstance,
    RecordError,
    assemble_instance,
    compute_stats,
    instance_from_record,
    instance_uuid,
    message_from_record,
    message_to_record,
    read_records,
    render_stats_table,
    select_sft,
    subset_for_strategy,
    to_export_record,
    validate_instance_record,
    write_records,
)
from mcpforge.gateway import ChatMessage, ToolCall
from mcpforge.registry import ServerSpec, ToolSpec
from mcpforge.task_synth import TaskDraft


def make_server(name, tools):
    return ServerSpec(
        qualified_name=name,
        display_name=name,
        description="d",
        transport="streamable-http",
        endpoint_url=f"http://fleet/{name}/mcp",
        usage_count=10,
        tools=[ToolSpec(name=t, description="") for t in tools],
    )


def simple_trajectory(calls=(("srv-hub-fetch_item", "ok"),), final="done"):
    messages = [
        ChatMessage(role="system", content="sys"),
        ChatMessage(role="user", content="please"),
    ]
    for name, result in calls:
        messages.append(
            ChatMessage(role="assistant", content="", function_call=ToolCall(name=name, arguments={"q": "x"}))
        )
        messages.append(ChatMessage(role="function", content=result, name=name))
    messages.append(ChatMessage(role="assistant", content=final))
    return Trajectory(messages=messages, outcome="completed", tool_call_count=len(calls))


def make_draft(question="Fetch the latest item.", targets=("srv-hub-fetch_item",), strategy="single"):
    server = make_server("srv-hub", ["fetch_item", "send_note"])
    return TaskDraft(
        question=question,
        target_tools=list(targets),
        context_servers=[server],
        strategy=strategy,
        seed=3,
        generator_id="gen",
    )


# --- identity -----------------------------------------------------------------


def test_uuid_is_deterministic_and_content_keyed():
    a = instance_uuid("q", "single-turn-original", "gen", 3)
    assert a == instance_uuid("q", "single-turn-original", "gen", 3)
    others = {
        instance_uuid("q2", "single-turn-original", "gen", 3),
        instance_uuid("q", "irrelevant", "gen", 3),
        instance_uuid("q", "single-turn-original", "gen2", 3),
        instance_uuid("q", "single-turn-original", "gen", 4),
    }
    assert a not in others
    assert len(others) == 4


@given(
    question=st.text(max_size=40),
    subset=st.sampled_from(SUBSETS),
    seed=st.integers(0, 10**6),
)
def test_uuid_is_a_valid_uuid_string(question, subset, seed):
    import uuid

    value = instance_uuid(question, subset, "gen", seed)
    assert uuid.UUID(value).version == 5


def test_uuid_separator_prevents_field_bleed():
    # moving a character across the field boundary must change the id
    assert instance_uuid("ab", "s", "gen", 1) != instance_uuid("b", "sa", "gen", 1)


# --- subset mapping -------------------------------------------------------------


@pytest.mark.parametrize(
    "strategy, subset",
    [
        ("single", "single-turn-original"),
        ("multi", "single-turn-original"),
        ("featured", "single-turn-original"),
        ("irrelevant", "irrelevant"),
        ("diversify-persona", "single-turn-diversify"),
        ("diversify-constraint", "single-turn-diversify"),
    ],
)
def test_subset_for_strategy(strategy, subset):
    assert subset_for_strategy(strategy) == subset


def test_multiturn_flag_overrides_strategy():
    assert subset_for_strategy("multi", multiturn=True) == "multi-turn"


def test_unknown_strategy_subset():
    with pytest.raises(AssemblyError):
        subset_for_strategy("bulk")


# --- message round-trips ----------------------------------------------------------


def test_message_roundtrip_plain():
    msg = ChatMessage(role="user", content="hi")
    rec = message_to_record(msg)
    assert rec == {"role": "user", "content": "hi"}
    back = message_from_record(rec)
    assert back.role == "user" and back.content == "hi" and back.function_call is None


def test_message_roundtrip_tool_call():
    call = ToolCall(name="srv-fetch", arguments={"b": 2, "a": 1})
    rec = message_to_record(ChatMessage(role="assistant", content="", function_call=call))
    # arguments serialize as a canonical JSON string
    assert rec["function_call"]["arguments"] == '{"a": 1, "b": 2}'
    back = message_from_record(rec)
    assert back.function_call.name == "srv-fetch"
    assert back.function_call.arguments == {"a": 1, "b": 2}
    assert back.function_call.parse_error is False


def test_message_record_tolerates_dict_arguments():
    rec = {
        "role": "assistant",
        "content": "",
        "function_call": {"name": "srv-fetch", "arguments": {"q": "x"}},
    }
    back = message_from_record(rec)
    assert back.function_call.arguments == {"q": "x"}
    # re-serialization normalizes to the string form
    again = message_to_record(back)
    assert again["function_call"]["arguments"] == '{"q": "x"}'


def test_message_record_keeps_broken_arguments():
    rec = {
        "role": "assistant",
        "content": "",
        "function_call": {"name": "srv-fetch", "arguments": "{not json"},
    }
    back = message_from_record(rec)
    assert back.function_call.parse_error is True
    assert back.function_call.raw_arguments == "{not json"
    # the broken text survives a write/read cycle for audit
    assert message_to_record(back)["function_call"]["arguments"] == "{not json"


def test_function_message_keeps_name():
    rec = message_to_record(ChatMessage(role="function", content="out", name="srv-fetch"))
    assert rec["name"] == "srv-fetch"
    assert message_from_record(rec).name == "srv-fetch"


# --- assembly ----------------------------------------------------------------------


def test_assemble_basic_instance():
    draft = make_draft()
    inst = assemble_instance(draft, simple_trajectory(), None, None)
    assert inst.subset == "single-turn-original"
    assert inst.question == draft.question
    assert inst.target_tools == "fetch_item"
    assert inst.messages_num_rounds == len(inst.messages) == 5
    assert inst.uuid == instance_uuid(draft.question, inst.subset, "gen", 3)
    rec = inst.to_record()
    assert list(rec) == list(REQUIRED_FIELDS)
    assert validate_instance_record(rec) == []


def test_assemble_rejects_bad_grammar():
    draft = make_draft()
    broken = Trajectory(
        messages=[ChatMessage(role="user", content="no system")],
        outcome="completed",
    )
    with pytest.raises(AssemblyError, match="grammar"):
        assemble_instance(draft, broken, None, None)


def test_assemble_rejects_unknown_subset():
    with pytest.raises(AssemblyError, match="unknown subset"):
        assemble_instance(make_draft(), simple_trajectory(), None, None, subset="bonus")


def test_assemble_irrelevant_requires_empty_targets():
    populated = make_draft()
    with pytest.raises(AssemblyError, match="conflicts"):
        assemble_instance(populated, simple_trajectory(), None, None, subset="irrelevant")
    empty = make_draft(targets=(), strategy="irrelevant")
    quiet = simple_trajectory(calls=())
    inst = assemble_instance(empty, quiet, None, None)
    assert inst.subset == "irrelevant" and inst.target_tools == ""
    # and the reverse conflict: empty targets under a tool-using subset
    with pytest.raises(AssemblyError, match="conflicts"):
        assemble_instance(empty, quiet, None, None, subset="single-turn-original")


# --- record validation ----------------------------------------------------------


def valid_record():
    return assemble_instance(make_draft(), simple_trajectory(), None, None).to_record()


@pytest.mark.parametrize("missing", REQUIRED_FIELDS)
def test_each_required_field_is_enforced(missing):
    rec = valid_record()
    del rec[missing]
    assert validate_instance_record(rec) == [f"missing field: {missing}"]
    with pytest.raises(RecordError):
        instance_from_record(rec)


def test_round_count_mismatch_detected():
    rec = valid_record()
    rec["messages_num_rounds"] += 1
    assert any("messages_num_rounds" in p for p in validate_instance_record(rec))


def test_subset_target_consistency_detected():
    rec = valid_record()
    rec["subset"] = "irrelevant"
    assert any("irrelevant subset" in p for p in validate_instance_record(rec))


def test_unknown_subset_detected():
    rec = valid_record()
    rec["subset"] = "bonus-round"
    assert any("unknown subset" in p for p in validate_instance_record(rec))


def test_instance_roundtrip_preserves_everything():
    inst = assemble_instance(make_draft(), simple_trajectory(), None, None)
    back = instance_from_record(json.loads(json.dumps(inst.to_record())))
    assert back.to_record() == inst.to_record()


def test_export_record_stringifies_nested_blocks():
    rec = valid_record()
    out = to_export_record(rec)
    assert isinstance(out["messages"], str)
    assert json.loads(out["messages"]) == rec["messages"]
    assert json.loads(out["metadata"]) == rec["metadata"]
    assert out["uuid"] == rec["uuid"]


# --- jsonl io ---------------------------------------------------------------------


def test_write_then_read_roundtrip(tmp_path):
    path = tmp_path / "data.jsonl"
    records = [{"i": i, "text": f"row {i}"} for i in range(5)]
    assert write_records(path, records) == 5
    assert list(read_records(path)) == records
    assert not path.with_name("data.jsonl.tmp").exists()


def test_read_skips_blank_lines(tmp_path):
    path = tmp_path / "data.jsonl"
    path.write_text('{"a": 1}\n\n{"a": 2}\n', encoding="utf-8")
    assert [r["a"] for r in read_records(path)] == [1, 2]


def test_read_reports_malformed_line(tmp_path):
    path = tmp_path / "data.jsonl"
    path.write_text('{"a": 1}\n{"a": trunca', encoding="utf-8")
    with pytest.raises(RecordError, match=r"data\.jsonl:2"):
        list(read_records(path))


def test_read_rejects_non_object_rows(tmp_path):
    path = tmp_path / "data.jsonl"
    path.write_text("[1, 2]\n", encoding="utf-8")
    with pytest.raises(RecordError, match="not an object"):
        list(read_records(path))


# --- statistics ----------------------------------------------------------------


def instance_for_stats(subset, question, n_calls, parallel=False, servers=1):
    messages = [
        ChatMessage(role="system", content="s"),
        ChatMessage(role="user", content=question),
    ]
    if parallel:
        for i in range(2):
            messages.append(
                ChatMessage(role="assistant", content="", function_call=ToolCall(name=f"t{i}"))
            )
        for i in range(2):
            messages.append(ChatMessage(role="function", content="ok", name=f"t{i}"))
    else:
        for i in range(n_calls):
            messages.append(
                ChatMessage(role="assistant", content="", function_call=ToolCall(name=f"t{i}"))
            )
            messages.append(ChatMessage(role="function", content="ok", name=f"t{i}"))
    messages.append(ChatMessage(role="assistant", content="done"))
    targets = ", ".join(f"t{i}" for i in range(n_calls)) if subset != "irrelevant" else ""
    return DatasetInstance(
        uuid=f"u-{subset}-{question}",
        subset=subset,
        question=question,
        target_tools=targets,
        messages=messages,
        metadata={
            "server_specs": [
                {"qualified_name": f"s{j}", "tools": ["a", "b"]} for j in range(servers)
            ]
        },
    )


def test_stats_histograms_conserve_mass():
    instances = [
        instance_for_stats("single-turn-original", "one two three", 1),
        instance_for_stats("single-turn-original", "one two", 2, servers=2),
        instance_for_stats("irrelevant", "just a question", 0),
        instance_for_stats("multi-turn", "a b c d", 2, parallel=True),
    ]
    report = compute_stats(instances)
    assert report.instance_count == 4
    for name, hist in report.histograms().items():
        assert sum(hist.values()) == 4, name
    assert report.subsets["single-turn-original"] == 2
    assert report.call_pattern == {"single": 2, "none": 1, "parallel": 1}
    assert report.question_token_length == {3: 2, 2: 1, 4: 1}
    assert report.servers_per_instance == {1: 3, 2: 1}
    assert report.context_tools_per_instance == {2: 3, 4: 1}


def test_stats_as_dict_uses_string_keys():
    report = compute_stats([instance_for_stats("irrelevant", "hi", 0)])
    rec = report.as_dict()
    assert rec["instance_count"] == 1
    assert rec["rounds_per_instance"] == {"3": 1}
    assert all(isinstance(k, str) for k in rec["question_token_length"])


def test_stats_table_renders_every_histogram():
    report = compute_stats([instance_for_stats("irrelevant", "hi", 0)])
    table = render_stats_table(report)
    assert table.startswith("instances: 1")
    for name in report.histograms():
        assert f"{name}:" in table


def test_stats_custom_tokenizer():
    report = compute_stats(
        [instance_for_stats("irrelevant", "abc", 0)], tokenizer=list
    )
    assert report.question_token_length == {3: 1}


# --- fine-tuning selection ---------------------------------------------------------


def scored_instance(subset, qq, sr, comp, conc, pct):
    inst = instance_for_stats(subset, "q", 1 if subset != "irrelevant" else 0)
    inst.question_quality_assessment = {
        "question_quality": {"reasoning": "", "score": qq},
        "scenario_realism": {"reasoning": "", "score": sr},
    }
    inst.response_quality_assessment = {
        "completeness": {"reasoning": "", "score": comp},
        "conciseness": {"reasoning": "", "score": conc},
        "desired_tools_used_percentage": pct,
        "order_correctness": True,
    }
    return inst


def test_select_sft_applies_all_gates():
    keep = scored_instance("single-turn-original", 5, 5, 4, 4, 1.0)
    low_quality = scored_instance("single-turn-original", 4, 5, 4, 4, 1.0)
    low_realism = scored_instance("single-turn-original", 5, 4, 4, 4, 1.0)
    incomplete = scored_instance("single-turn-original", 5, 5, 3, 4, 1.0)
    rambling = scored_instance("single-turn-original", 5, 5, 4, 3, 1.0)
    missed_tool = scored_instance("single-turn-original", 5, 5, 4, 4, 0.5)
    other_subset = scored_instance("multi-turn", 5, 5, 5, 5, 1.0)
    pool = [keep, low_quality, low_realism, incomplete, rambling, missed_tool, other_subset]
    selected, mixture = select_sft(pool)
    assert selected == [keep, other_subset]
    assert mixture == {"single-turn-original": 1, "multi-turn": 1}


def test_select_sft_respects_policy_overrides():
    relaxed = PolicyConfig(
        sft_min_question_quality=3,
        sft_min_scenario_realism=3,
        sft_min_completeness=3,
        sft_min_conciseness=3,
        sft_min_tool_use=0.5,
    )
    borderline = scored_instance("single-turn-original", 3, 3, 3, 3, 0.5)
    selected, _ = select_sft([borderline], relaxed)
    assert selected == [borderline]
    strict_selected, _ = select_sft([borderline])
    assert strict_selected == []
