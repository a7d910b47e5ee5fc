import json

import pytest

from mcpforge.gateway import BackendProfile, ChatMessage, SamplingParams, ToolCall, render_prompt
from mcpforge.mcp_client import UnknownToolError
from mcpforge.mockbed import (
    DemoJudge,
    DemoTaskGenerator,
    DemoTrajectory,
    LocalSession,
    MockFleet,
    MockServer,
    MockTool,
    ScriptBuilder,
    ScriptedChatBackend,
    ScriptedMiss,
    ScriptedReply,
    dump_script,
    fingerprint,
    load_script,
)
from mcpforge.prompt_library import get_template

PARAMS = SamplingParams()


def profile(role):
    return BackendProfile(id=f"demo-{role}", model="demo", role=role)


# --- mock tools and servers ---------------------------------------------------


def test_tool_behaviors():
    assert MockTool(name="echo_one").invoke({"q": "hello"}) == ("echo_one: hello", False)
    text, is_error = MockTool(name="echo_many").invoke({"b": 2, "a": 1})
    assert json.loads(text.split(": ", 1)[1]) == {"a": 1, "b": 2}
    assert is_error is False
    assert MockTool(name="fx", behavior="fixed", fixed_result="pinned").invoke({}) == ("pinned", False)
    assert MockTool(name="bad", behavior="error", fixed_result="boom").invoke({}) == ("boom", True)


def test_unknown_behavior_rejected():
    with pytest.raises(ValueError, match="unknown tool behavior"):
        MockTool(name="x", behavior="explode")


def test_fleet_requires_unique_keys():
    dup = [
        MockServer(key="twin", description="a", tools=[MockTool(name="t")]),
        MockServer(key="twin", description="b", tools=[MockTool(name="t")]),
    ]
    with pytest.raises(ValueError, match="duplicate"):
        MockFleet(dup)


def test_fleet_endpoints_and_spec_records(fleet):
    records = fleet.spec_records()
    assert len(records) == len(fleet.servers)
    for server, rec in zip(fleet.servers, records):
        assert rec["endpointUrl"] == fleet.endpoint(server.key)
        assert rec["qualifiedName"] == server.key
    with pytest.raises(KeyError):
        fleet.endpoint("no-such-server")


# --- local sessions -------------------------------------------------------------


@pytest.fixture
def local():
    server = MockServer(
        key="store",
        description="storage",
        tools=[
            MockTool(name="put_item"),
            MockTool(name="broken", behavior="error", fixed_result="nope"),
        ],
    )
    return LocalSession(server)


def test_local_session_lists_and_calls(local):
    names = [t["name"] for t in local.list_tools()]
    assert names == ["put_item", "broken"]
    result = local.call_tool("put_item", {"v": "x"})
    assert result.text() == "put_item: x"
    assert result.is_error is False
    # raw mirrors the wire shape
    assert json.loads(result.raw)["content"][0]["text"] == "put_item: x"


def test_local_session_error_result(local):
    result = local.call_tool("broken", {})
    assert result.is_error is True and result.text() == "nope"


def test_local_session_unknown_tool(local):
    with pytest.raises(UnknownToolError):
        local.call_tool("missing", {})


def test_local_session_close(local):
    local.close()
    with pytest.raises(RuntimeError, match="closed"):
        local.call_tool("put_item", {})


# --- conversation fingerprints ----------------------------------------------------


def test_fingerprint_tracks_last_input_and_turn_count():
    base = [ChatMessage(role="user", content="q")]
    assert fingerprint(base) == fingerprint(list(base))
    assert fingerprint(base) != fingerprint([ChatMessage(role="user", content="other")])
    with_turn = base + [ChatMessage(role="assistant", content="a")]
    assert fingerprint(with_turn) != fingerprint(base)
    # a function result supersedes the user message as the latest input
    with_result = with_turn + [ChatMessage(role="function", content="out", name="t")]
    assert fingerprint(with_result) != fingerprint(with_turn)


def test_fingerprint_ignores_stale_history():
    a = [
        ChatMessage(role="user", content="first"),
        ChatMessage(role="assistant", content="x"),
        ChatMessage(role="user", content="latest"),
    ]
    b = [
        ChatMessage(role="user", content="different start"),
        ChatMessage(role="assistant", content="y"),
        ChatMessage(role="user", content="latest"),
    ]
    assert fingerprint(a) == fingerprint(b)


# --- scripted backend ---------------------------------------------------------------


def test_scripted_backend_replays_and_misses():
    backend = ScriptedChatBackend(profile("trajectory"))
    state = [ChatMessage(role="user", content="hi")]
    backend.add(state, ScriptedReply(content="hello"))
    turn = backend.complete(state, None, PARAMS)
    assert turn.content == "hello"
    with pytest.raises(ScriptedMiss, match="no scripted reply"):
        backend.complete([ChatMessage(role="user", content="unseen")], None, PARAMS)


def test_script_builder_mirrors_runner_layout():
    backend = ScriptedChatBackend(profile("trajectory"))
    call = ToolCall(name="store-put_item", arguments={"v": "x"})
    (
        ScriptBuilder(backend)
        .user("save it")
        .reply_calls([call])
        .tool_result("store-put_item", "put_item: x")
        .reply_text("saved")
    )
    # replay the exact states the runner would present
    state1 = [ChatMessage(role="user", content="save it")]
    turn1 = backend.complete(state1, None, PARAMS)
    assert [c.name for c in turn1.tool_calls] == ["store-put_item"]
    state2 = state1 + [
        ChatMessage(role="assistant", content="", function_call=call),
        ChatMessage(role="function", content="put_item: x", name="store-put_item"),
    ]
    assert backend.complete(state2, None, PARAMS).content == "saved"


def test_script_dump_load_roundtrip(tmp_path):
    backend = ScriptedChatBackend(profile("trajectory"))
    ScriptBuilder(backend).user("q").reply_calls(
        [ToolCall(name="t", arguments={"a": 1})], content="thinking"
    )
    path = tmp_path / "script.json"
    dump_script(path, backend.script)
    loaded = load_script(path)
    assert set(loaded) == set(backend.script)
    for key, reply in backend.script.items():
        assert loaded[key].content == reply.content
        assert [(c.name, c.arguments) for c in loaded[key].tool_calls] == [
            (c.name, c.arguments) for c in reply.tool_calls
        ]


# --- demo generator -------------------------------------------------------------


def one_tool_prompt():
    return render_prompt(
        get_template("task_single_one_tool"),
        {
            "MCP_SERVER_NAME": "Relay Hub",
            "MCP_SERVER_DESCRIPTION": "message relay",
            "TOOL_LIST": "- send_note: deliver a note\n- list_notes: show notes",
        },
    )


def test_demo_generator_picks_a_real_tool():
    gen = DemoTaskGenerator(profile("task_generator"))
    body = gen.complete([ChatMessage(role="user", content=one_tool_prompt())], None, PARAMS).content
    assert "<target_tool>" in body and "<question>" in body
    picked = body.split("<target_tool>")[1].split("</target_tool>")[0]
    assert picked in ("send_note", "list_notes")


def test_demo_generator_resamples_repeated_prompts():
    gen = DemoTaskGenerator(profile("task_generator"))
    prompt = [ChatMessage(role="user", content=one_tool_prompt())]
    first = gen.complete(prompt, None, PARAMS).content
    second = gen.complete(prompt, None, PARAMS).content
    assert first != second
    # a fresh instance replays the identical sequence
    again = DemoTaskGenerator(profile("task_generator"))
    assert again.complete(prompt, None, PARAMS).content == first
    assert again.complete(prompt, None, PARAMS).content == second


def test_demo_generator_category_stays_in_palette():
    gen = DemoTaskGenerator(profile("task_generator"))
    prompt = render_prompt(
        get_template("server_category"),
        {
            "MCP_SERVER_NAME": "Relay Hub",
            "MCP_SERVER_DESCRIPTION": "message relay",
            "TOOL_LIST": "- send_note: deliver a note",
            "CATEGORY_LIST": "\n".join(f"- {c}" for c in gen.palette),
        },
    )
    body = gen.complete([ChatMessage(role="user", content=prompt)], None, PARAMS).content
    label = body.split("<primary_label>")[1].split("</primary_label>")[0]
    assert label in gen.palette


def test_demo_generator_rejects_foreign_prompts():
    gen = DemoTaskGenerator(profile("task_generator"))
    with pytest.raises(ScriptedMiss):
        gen.complete([ChatMessage(role="user", content="tell me a story")], None, PARAMS)


# --- demo judge -------------------------------------------------------------------


def test_demo_judge_scores_task_dimensions():
    from mcpforge.judge import TASK_DIMENSIONS, rating_to_score
    from mcpforge.gateway import TagSpec, extract_tagged

    judge = DemoJudge(profile("judge"))
    prompt = render_prompt(
        get_template("task_quality"),
        {
            "QUESTION_CONTENT": "Can you pull together the latest numbers?",
            "INTENDED_TOOL": "query_series",
            "ALL_SERVER_AND_TOOL_INFORMATION": "- query_series: run a query",
        },
    )
    body = judge.complete([ChatMessage(role="user", content=prompt)], None, PARAMS).content
    for dim in TASK_DIMENSIONS:
        block = extract_tagged(body, [TagSpec(dim)])[dim][0]
        rating = extract_tagged(block, [TagSpec("rating")])["rating"][0]
        assert 2 <= rating_to_score(dim, rating) <= 5


def test_demo_judge_scores_response_dimensions():
    from mcpforge.judge import RESPONSE_DIMENSIONS

    judge = DemoJudge(profile("judge"))
    prompt = render_prompt(
        get_template("traj_quality"),
        {
            "QUESTION_CONTENT": "q",
            "INTENDED_TOOL": "query_series",
            "CONVERSATION_HISTORY": "[user] q\n[assistant] done",
        },
    )
    body = judge.complete([ChatMessage(role="user", content=prompt)], None, PARAMS).content
    for dim in RESPONSE_DIMENSIONS:
        assert f"<{dim}>" in body
    assert "<question_quality>" not in body


def test_demo_judge_rejects_foreign_prompts():
    with pytest.raises(ScriptedMiss):
        DemoJudge(profile("judge")).complete(
            [ChatMessage(role="user", content="grade this")], None, PARAMS
        )


# --- demo trajectory -----------------------------------------------------------------


def schemas_for(names):
    return [
        {"type": "function", "function": {"name": n, "parameters": {"type": "object"}}}
        for n in names
    ]


def test_demo_trajectory_summarizes_after_results():
    pilot = DemoTrajectory(profile("trajectory"))
    messages = [
        ChatMessage(role="user", content="do it"),
        ChatMessage(role="assistant", content="", function_call=ToolCall(name="hub-t")),
        ChatMessage(role="function", content="t: out", name="hub-t"),
    ]
    turn = pilot.complete(messages, schemas_for(["hub-t"]), PARAMS)
    assert turn.tool_calls == []
    assert "t: out" in turn.content


def test_demo_trajectory_answers_directly_without_tools():
    pilot = DemoTrajectory(profile("trajectory"))
    turn = pilot.complete([ChatMessage(role="user", content="hello")], [], PARAMS)
    assert turn.tool_calls == []


def test_demo_trajectory_call_rate_near_half():
    pilot = DemoTrajectory(profile("trajectory"))
    schemas = schemas_for(["hub-alpha", "hub-beta", "hub-gamma"])
    calls = 0
    n = 200
    for i in range(n):
        msg = [ChatMessage(role="user", content=f"fresh question number {i}")]
        turn = pilot.complete(msg, schemas, PARAMS)
        if turn.tool_calls:
            calls += 1
            assert all(c.name.startswith("hub-") for c in turn.tool_calls)
            assert len(turn.tool_calls) in (1, 2)
    assert 0.35 <= calls / n <= 0.65


def test_demo_trajectory_is_deterministic():
    schemas = schemas_for(["hub-alpha", "hub-beta"])
    msg = [ChatMessage(role="user", content="the same question")]
    a = DemoTrajectory(profile("trajectory")).complete(msg, schemas, PARAMS)
    b = DemoTrajectory(profile("trajectory")).complete(msg, schemas, PARAMS)
    assert a.content == b.content
    assert [c.name for c in a.tool_calls] == [c.name for c in b.tool_calls]
