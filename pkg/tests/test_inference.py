from __future__ import annotations

import json
import threading

import httpx
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trajprompt.embedding import TransportError
from trajprompt.inference import (
    NO_MATCH,
    OK,
    OUT_OF_RANGE,
    CompletionConfig,
    FrequencyPredictor,
    PredictionRecord,
    complete,
    load_predictions,
    parse_poi_id,
    run_predictions,
    save_predictions,
)
from trajprompt.prompting import PromptRecord, build_answer

from .helpers import ck


@pytest.mark.parametrize(
    "raw,id_range,expected",
    [
        ("<answer>: At 2012-05-01 09:00, user 12 will visit POI id 384.", 4980, (384, OK)),
        ("I think maybe 77 or 78", 100, (77, OK)),
        ("no idea", 100, (None, NO_MATCH)),
        ("", 100, (None, NO_MATCH)),
        ("poi ID 12", 100, (12, OK)),
        ("POI id 101", 100, (None, OUT_OF_RANGE)),
        ("<answer>: At 2012-05-01 09:00, user 12 will visit POI id 384.", 100, (None, OUT_OF_RANGE)),
        ("At 2012-05-01 09:00 it will be 55", 100, (55, OK)),
    ],
)
def test_parse_examples(raw, id_range, expected):
    assert parse_poi_id(raw, id_range) == expected


def test_parse_boundaries():
    assert parse_poi_id("POI id 0", 100) == (0, OK)
    assert parse_poi_id("POI id 100", 100) == (100, OK)


@settings(max_examples=300, deadline=None)
@given(
    user=st.integers(0, 10**5),
    poi=st.integers(0, 10**5),
    hours=st.floats(0, 24 * 365, allow_nan=False),
)
def test_answer_round_trip(user, poi, hours):
    assert parse_poi_id(build_answer(ck(user, poi, hours)), 10**5) == (poi, OK)


@settings(max_examples=300)
@given(st.text(max_size=80))
def test_parse_is_total(raw):
    pid, status = parse_poi_id(raw, 50)
    assert status in (OK, NO_MATCH, OUT_OF_RANGE)
    assert (pid is not None) == (status == OK)


def test_prediction_record_invariant():
    with pytest.raises(ValueError):
        PredictionRecord(0, "x", 5, NO_MATCH)
    with pytest.raises(ValueError):
        PredictionRecord(0, "x", None, OK)


# -- endpoint ------------------------------------------------------------------


def _server(reply, failures=(), seen=None):
    pending = list(failures)

    def handler(request: httpx.Request) -> httpx.Response:
        body = json.loads(request.content)
        if seen is not None:
            seen.append(body)
        if pending:
            kind = pending.pop(0)
            if kind == "timeout":
                raise httpx.ReadTimeout("timed out", request=request)
            return httpx.Response(kind)
        return httpx.Response(200, json=reply(body))

    return httpx.Client(transport=httpx.MockTransport(handler))


def test_complete_completion_mode():
    seen: list = []
    client = _server(lambda b: {"choices": [{"text": " POI id 3."}]}, seen=seen)
    out = complete("Q?", CompletionConfig(url="http://x/v1/completions", model="m"), client)
    assert out == " POI id 3."
    assert seen[0] == {"model": "m", "prompt": "Q?", "temperature": 0.0, "max_tokens": 48}


def test_complete_chat_mode():
    seen: list = []
    client = _server(lambda b: {"choices": [{"message": {"role": "assistant", "content": "POI id 9"}}]}, seen=seen)
    out = complete("Q?", CompletionConfig(url="http://x", model="m", mode="chat"), client)
    assert out == "POI id 9"
    assert seen[0]["messages"] == [{"role": "user", "content": "Q?"}]


def test_complete_retries_timeouts(caplog):
    client = _server(lambda b: {"choices": [{"text": "POI id 1"}]}, failures=["timeout", "timeout"])
    with caplog.at_level("INFO"):
        out = complete("Q", CompletionConfig(url="http://x", backoff=0, max_attempts=3), client)
    assert out == "POI id 1"
    assert "succeeded after 2 retries" in caplog.text


def test_complete_bad_shape():
    client = _server(lambda b: {"nope": 1})
    with pytest.raises(TransportError):
        complete("Q", CompletionConfig(url="http://x"), client)


# -- runs ------------------------------------------------------------------------


def _recs(n: int) -> list[PromptRecord]:
    return [PromptRecord(f"question {i}", f"<answer>: POI id {i}.", i, 0, i, "2012-01-01T00:00:00Z") for i in range(n)]


def test_run_preserves_order_with_concurrency():
    import time

    def slow(q: str) -> str:
        i = int(q.split()[1])
        time.sleep(0.001 * (10 - i))
        return f"POI id {i}"

    preds = run_predictions(_recs(10), slow, 50, concurrency_limit=2)
    assert [p.trajectory_id for p in preds] == list(range(10))
    assert [p.predicted_poi_id for p in preds] == list(range(10))


def test_run_resumes_from_checkpoint(tmp_path):
    ckpt = tmp_path / "ckpt.jsonl"
    sent: list[str] = []

    def crash_at_5(q: str) -> str:
        if q == "question 5":
            raise KeyboardInterrupt
        sent.append(q)
        return "POI id 1"

    with pytest.raises(KeyboardInterrupt):
        run_predictions(_recs(10), crash_at_5, 50, checkpoint=ckpt)
    assert len(ckpt.read_text().splitlines()) == 5

    resent: list[str] = []

    def healthy(q: str) -> str:
        resent.append(q)
        return "POI id 2"

    preds = run_predictions(_recs(10), healthy, 50, checkpoint=ckpt)
    assert resent == [f"question {i}" for i in range(5, 10)]
    assert [p.predicted_poi_id for p in preds] == [1] * 5 + [2] * 5


def test_run_corrupt_checkpoint_starts_fresh(tmp_path, caplog):
    ckpt = tmp_path / "ckpt.jsonl"
    ckpt.write_text('{"trajectory_id": 0, "raw_ou\n')
    calls: list[str] = []
    with caplog.at_level("WARNING"):
        preds = run_predictions(_recs(3), lambda q: calls.append(q) or "POI id 4", 50, checkpoint=ckpt)
    assert len(calls) == 3 and all(p.parse_status == OK for p in preds)
    assert "corrupt" in caplog.text


def test_run_echo_gold_endpoint_parses_everything():
    recs = _recs(20)
    gold = {r.question: r.answer for r in recs}
    client = _server(lambda b: {"choices": [{"text": gold[b["prompt"]]}]})
    cfg = CompletionConfig(url="http://x")
    preds = run_predictions(recs, lambda q: complete(q, cfg, client), 50, concurrency_limit=4)
    assert all(p.parse_status == OK for p in preds)
    assert [p.predicted_poi_id for p in preds] == [r.target_poi_id for r in recs]


def test_run_hard_failure_degrades(tmp_path):
    client = _server(lambda b: {}, failures=[503] * 10)
    cfg = CompletionConfig(url="http://x", backoff=0, max_attempts=2)
    ckpt = tmp_path / "c.jsonl"
    preds = run_predictions(_recs(2), lambda q: complete(q, cfg, client), 50, checkpoint=ckpt)
    assert all(p.parse_status == NO_MATCH and p.raw_output == "" and p.error for p in preds)
    assert ckpt.read_text() == ""


def test_run_concurrency_invariant():
    lock = threading.Lock()
    predictor = FrequencyPredictor()

    def gen(q: str) -> str:
        with lock:
            return predictor(q)

    recs = [PromptRecord(f"POI id {i % 7} which POI id {i % 3} which", "a", i, 0, 0, "t") for i in range(30)]
    a = run_predictions(recs, gen, 50, concurrency_limit=1)
    b = run_predictions(recs, gen, 50, concurrency_limit=5)
    strip = lambda ps: [(p.trajectory_id, p.raw_output, p.predicted_poi_id, p.parse_status) for p in ps]  # noqa: E731
    assert strip(a) == strip(b)


def test_frequency_predictor():
    p = FrequencyPredictor()
    assert p("POI id 3 which POI id 5 which POI id 3 which") == "<answer>: user will visit POI id 3."
    # tie goes to the latest mention
    assert parse_poi_id(p("POI id 3 which POI id 5 which"), 10) == (5, OK)
    assert parse_poi_id(p("nothing here"), 10) == (None, NO_MATCH)


def test_predictions_round_trip(tmp_path):
    preds = [PredictionRecord(0, "POI id 1", 1, OK, 12), PredictionRecord(1, "", None, NO_MATCH, 3, "boom")]
    save_predictions(preds, tmp_path / "p.jsonl")
    assert load_predictions(tmp_path / "p.jsonl") == preds
    save_predictions(preds, tmp_path / "q.jsonl", with_latency=False)
    assert [p.latency_ms for p in load_predictions(tmp_path / "q.jsonl")] == [0, 0]
