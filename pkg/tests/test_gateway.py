import json
import math

import pytest
from hypothesis import given, strategies as st

from mcpforge.gateway import (
    BackendProfile,
    ChatMessage,
    Gateway,
    HttpChatBackend,
    ModelTurn,
    PromptError,
    RateLimiter,
    ResponseFormatError,
    SamplingParams,
    TagParseError,
    TagSpec,
    ToolCall,
    TransportError,
    extract_attributed,
    extract_tagged,
    parse_tool_call,
    render_prompt,
    template_slots,
    wire_messages,
)


def test_template_slots_in_order_of_first_appearance():
    assert template_slots("a {B} c {A} d {B}") == ("B", "A")


def test_render_prompt_fills_slots():
    assert render_prompt("ask {NAME} about {TOPIC}", {"NAME": "x", "TOPIC": "y"}) == "ask x about y"


def test_render_prompt_names_all_missing_slots():
    with pytest.raises(PromptError) as err:
        render_prompt("{A} {B} {C}", {"B": "x"})
    assert "A" in str(err.value) and "C" in str(err.value)


def test_extract_tagged_basic_and_numbered_family():
    text = (
        "<response><question>q</question>"
        "<variation_2><q>second</q></variation_2>"
        "<variation_1><q>first</q></variation_1></response>"
    )
    tags = extract_tagged(text, [TagSpec("question"), TagSpec("variation_*")])
    assert tags["question"] == ["q"]
    # family entries come back ordered by their number, not document order
    assert [v.strip() for v in tags["variation_*"]] == ["<q>first</q>", "<q>second</q>"]


def test_extract_tagged_missing_required_tag():
    with pytest.raises(TagParseError):
        extract_tagged("<response>nothing</response>", [TagSpec("question")])


def test_extract_tagged_ignores_fenced_examples():
    text = "```\n<question>from the instructions</question>\n```\n<response><question>real</question></response>"
    tags = extract_tagged(text, [TagSpec("question")])
    assert tags["question"] == ["real"]


def test_extract_attributed_entries():
    entries = extract_attributed(
        '<tool server="alpha">first_tool</tool><tool server="beta">second_tool</tool>',
        "tool",
    )
    assert [(a["server"], c) for a, c in entries] == [
        ("alpha", "first_tool"),
        ("beta", "second_tool"),
    ]


def test_parse_tool_call_keeps_unparsable_arguments():
    call = parse_tool_call("t", "{not json")
    assert call.parse_error and call.raw_arguments == "{not json"
    ok = parse_tool_call("t", '{"a": 1}')
    assert not ok.parse_error and ok.arguments == {"a": 1}


def test_wire_messages_pairs_calls_fifo():
    messages = [
        ChatMessage(role="user", content="q"),
        ChatMessage(role="assistant", content="", function_call=ToolCall(name="a", arguments={})),
        ChatMessage(role="assistant", content="", function_call=ToolCall(name="b", arguments={})),
        ChatMessage(role="function", content="ra", name="a"),
        ChatMessage(role="function", content="rb", name="b"),
    ]
    wire = wire_messages(messages)
    assert wire[1]["tool_calls"][0]["id"] == "call_0000"
    assert wire[2]["tool_calls"][0]["id"] == "call_0001"
    assert wire[3]["tool_call_id"] == "call_0000"
    assert wire[4]["tool_call_id"] == "call_0001"


@given(st.lists(st.floats(min_value=0.0, max_value=3.0), min_size=1, max_size=40), st.floats(min_value=0.5, max_value=20.0))
def test_rate_limiter_never_exceeds_rate_in_any_window(arrivals, rate):
    now = [0.0]
    limiter = RateLimiter(rate, clock=lambda: now[0], sleeper=lambda s: None)
    t = 0.0
    for gap in arrivals:
        t += gap
        now[0] = t
        limiter.acquire()
    slots = limiter.trace
    cap = math.ceil(rate)
    for i, start in enumerate(slots):
        in_window = sum(1 for s in slots if start <= s < start + 1.0 - 1e-9)
        assert in_window <= cap


class FlakyBackend:
    def __init__(self, failures):
        self.profile = BackendProfile(id="flaky", model="m")
        self.failures = failures
        self.calls = 0

    def complete(self, messages, tool_schemas, params):
        self.calls += 1
        if self.calls <= self.failures:
            raise TransportError("boom")
        return ModelTurn(content="ok", usage={"prompt_tokens": 5, "completion_tokens": 2})


def test_gateway_retries_transport_errors():
    gw = Gateway(retries=2)
    backend = FlakyBackend(failures=2)
    turn = gw.chat(backend, [ChatMessage(role="user", content="x")])
    assert turn.content == "ok"
    assert backend.calls == 3
    assert gw.usage_report() == {
        "flaky": {"requests": 1, "prompt_tokens": 5, "completion_tokens": 2}
    }


def test_gateway_gives_up_after_budget():
    gw = Gateway(retries=1)
    backend = FlakyBackend(failures=5)
    with pytest.raises(TransportError, match="after 2 attempts"):
        gw.chat(backend, [ChatMessage(role="user", content="x")])


class FakeHttpResponse:
    def __init__(self, status_code, body):
        self.status_code = status_code
        self._body = body
        self.text = json.dumps(body)

    def json(self):
        return self._body


class FakeHttpClient:
    def __init__(self, response):
        self.response = response
        self.last_payload = None

    def post(self, url, json=None, headers=None):
        self.last_payload = json
        return self.response


def _http_backend(response):
    profile = BackendProfile(id="h", model="m", endpoint="http://example.invalid/v1/chat")
    return HttpChatBackend(profile, api_key="k", client=FakeHttpClient(response))


def test_http_backend_parses_tool_calls():
    body = {
        "choices": [
            {
                "finish_reason": "tool_calls",
                "message": {
                    "content": None,
                    "tool_calls": [
                        {"function": {"name": "srv-t", "arguments": '{"q": "v"}'}}
                    ],
                },
            }
        ],
        "usage": {"prompt_tokens": 7, "completion_tokens": 3},
    }
    turn = _http_backend(FakeHttpResponse(200, body)).complete(
        [ChatMessage(role="user", content="x")], None, SamplingParams()
    )
    assert turn.finish_reason == "tool_calls"
    assert turn.tool_calls[0].name == "srv-t"
    assert turn.tool_calls[0].arguments == {"q": "v"}


def test_http_backend_maps_5xx_to_transport_error():
    with pytest.raises(TransportError):
        _http_backend(FakeHttpResponse(503, {})).complete(
            [ChatMessage(role="user", content="x")], None, SamplingParams()
        )


def test_http_backend_maps_4xx_to_format_error():
    with pytest.raises(ResponseFormatError):
        _http_backend(FakeHttpResponse(400, {"error": "bad"})).complete(
            [ChatMessage(role="user", content="x")], None, SamplingParams()
        )
