from __future__ import annotations

import json

import numpy as np
import pytest

from guimem.backends import (
    BackendConfig,
    CompressEntry,
    CompressRequest,
    HashEmbedder,
    JudgeRequest,
    MALFORMED_REPLY,
    ParseFailure,
    RemoteChatBackend,
    ScriptedBackend,
    SelectCandidate,
    SelectRequest,
    StepRequest,
    TransportFailure,
    WriteRequest,
    extract_json_object,
    format_action,
    invoke_compress,
    invoke_judge,
    invoke_select,
    invoke_step,
    invoke_write,
    parse_action,
    predict_action,
)
from guimem.backends.prompts import step_messages
from guimem.core import ActionKind, BBox, ScrollDirection, cosine

from conftest import make_screenshot


CFG = BackendConfig(max_retries=2)


def step_request(goal, step=3):
    return StepRequest(goal=goal, screenshot=make_screenshot(step=step), prev_action=None, wm_text="")


# --- reply extraction -----------------------------------------------------


def test_extract_json_object_plain():
    assert extract_json_object('{"a": 1}') == {"a": 1}


def test_extract_json_object_embedded_in_prose():
    text = 'Sure! Here is the result: {"a": {"b": "with } brace"}, "c": [1, 2]} trailing'
    assert extract_json_object(text) == {"a": {"b": "with } brace"}, "c": [1, 2]}


def test_extract_json_object_skips_broken_then_finds_valid():
    text = '{broken {"salience": 0.5, "summary": "ok"}'
    assert extract_json_object(text) == {"salience": 0.5, "summary": "ok"}


def test_extract_json_object_rejects_free_text():
    with pytest.raises(ParseFailure):
        extract_json_object("no structure here")


# --- step operator --------------------------------------------------------


def test_scripted_step_echo(goal):
    script = {
        ("step", "3"): {
            "salience": 0.9,
            "summary": "enabled dark mode toggle",
            "roi": [0.1, 0.2, 0.4, 0.3],
            "retrieve": 0,
        }
    }
    out, meta = invoke_step(ScriptedBackend(script), step_request(goal), CFG)
    assert out.salience == 0.9
    assert out.summary == "enabled dark mode toggle"
    assert out.roi == BBox(0.1, 0.2, 0.4, 0.3)
    assert out.retrieve == 0
    assert meta.attempts == 1 and not meta.fallback


def test_step_salience_clamped_with_warning(goal):
    script = {("step", "3"): {"salience": 1.3, "summary": "overshoot", "retrieve": 0}}
    out, meta = invoke_step(ScriptedBackend(script), step_request(goal), CFG)
    assert out.salience == 1.0
    assert any("clamped" in w for w in meta.warnings)


def test_step_flaky_retries_then_succeeds(goal):
    script = {("step", "3"): {"salience": 0.4, "summary": "ok", "retrieve": 0}}
    backend = ScriptedBackend(script, flaky={("step", "3"): 2})
    out, meta = invoke_step(backend, step_request(goal), CFG)
    assert out.summary == "ok"
    assert meta.attempts == 3
    assert not meta.fallback


def test_step_fallback_after_retries_exhausted(goal):
    backend = ScriptedBackend({("step", "3"): "not json at all"})
    out, meta = invoke_step(backend, step_request(goal), CFG)
    assert meta.fallback
    assert meta.attempts == 3  # 1 + max_retries
    assert out.salience == 0.0 and out.roi is None and out.retrieve == 0


def test_step_default_is_silent(goal):
    out, _ = invoke_step(ScriptedBackend(), step_request(goal), CFG)
    assert (out.salience, out.summary, out.roi, out.retrieve) == (0.0, "", None, 0)


def test_step_invalid_roi_dropped_with_warning(goal):
    script = {("step", "3"): {"salience": 0.8, "summary": "s", "roi": [0.9, 0.1, 0.1, 0.9]}}
    out, meta = invoke_step(ScriptedBackend(script), step_request(goal), CFG)
    assert out.roi is None
    assert any("dropped" in w for w in meta.warnings)


def test_step_positive_salience_requires_summary(goal):
    script = {("step", "3"): {"salience": 0.8, "summary": ""}}
    out, meta = invoke_step(ScriptedBackend(script), step_request(goal), CFG)
    assert meta.fallback  # empty summary with positive salience never parses


# --- compressor -------------------------------------------------------------


def compress_request(goal, n=4):
    return CompressRequest(
        goal=goal,
        entries=tuple(
            CompressEntry(step=i, summary=f"event {i}", roi_ids=(f"roi-{i}",))
            for i in range(1, n + 1)
        ),
    )


def test_compress_single_entry_default_keeps_identifier(goal):
    req = CompressRequest(goal=goal, entries=(CompressEntry(step=1, summary="e", roi_ids=("r1",)),))
    out, _ = invoke_compress(ScriptedBackend(), req, CFG, max_retained=2)
    assert out.retained_rois == ("r1",)
    assert "e" in out.summary


def test_compress_unknown_id_dropped(goal):
    script = {("compress", "1-4"): {"summary": "s", "retained_rois": ["roi-2", "ghost"]}}
    out, meta = invoke_compress(ScriptedBackend(script), compress_request(goal), CFG, 4)
    assert out.retained_rois == ("roi-2",)
    assert any("ghost" in w for w in meta.warnings)


def test_compress_retain_last_two_policy(goal):
    def policy(key, payload, n):
        ids = [rid for e in payload["entries"] for rid in e["roi_ids"]]
        return {"summary": "last two", "retained_rois": ids[-2:]}

    out, _ = invoke_compress(
        ScriptedBackend({("compress", "*"): policy}), compress_request(goal), CFG, 4
    )
    assert out.retained_rois == ("roi-3", "roi-4")


def test_compress_fallback_keeps_most_recent_identifier(goal):
    backend = ScriptedBackend({("compress", "*"): "garbage"})
    out, meta = invoke_compress(backend, compress_request(goal), CFG, 4)
    assert meta.fallback
    assert out.retained_rois == ("roi-4",)
    assert out.summary  # concatenated truncated summaries


def test_compress_requires_entries(goal):
    with pytest.raises(ValueError):
        CompressRequest(goal=goal, entries=())


# --- writer -----------------------------------------------------------------


def test_write_empty_memory_failure_outcome(goal):
    req = WriteRequest(goal=goal, outcome="failure", entries=(), roi_ids=())
    out, _ = invoke_write(ScriptedBackend(), req, CFG)
    assert out.summary
    assert out.outcome == "failure"
    assert out.retained_rois == ()


def test_write_outcome_echo_mismatch_overwritten(goal):
    script = {
        ("write", goal.text): {
            "summary": "done",
            "key_actions": [],
            "outcome": "success",
            "retained_rois": [],
        }
    }
    req = WriteRequest(goal=goal, outcome="failure", entries=(), roi_ids=())
    out, meta = invoke_write(ScriptedBackend(script), req, CFG)
    assert out.outcome == "failure"
    assert any("overwritten" in w for w in meta.warnings)


def test_write_fallback_uses_goal_and_first_roi(goal):
    backend = ScriptedBackend({("write", "*"): "NOPE"})
    req = WriteRequest(
        goal=goal, outcome="success",
        entries=(CompressEntry(step=1, summary="e", roi_ids=("a",)),),
        roi_ids=("a", "b"),
    )
    out, meta = invoke_write(backend, req, CFG)
    assert meta.fallback
    assert goal.text in out.summary
    assert out.retained_rois == ("a",)


# --- selector ----------------------------------------------------------------


def select_request(goal, ids):
    return SelectRequest(
        goal=goal,
        screenshot=make_screenshot(step=2),
        candidates=tuple(
            SelectCandidate(entry_id=i, summary=f"summary {i}", outcome="success") for i in ids
        ),
    )


def test_select_empty_candidates_short_circuits(goal):
    out, meta = invoke_select(ScriptedBackend(), select_request(goal, []), CFG, 2)
    assert out.selected_ids == ()
    assert meta.attempts == 0


def test_select_scripted_subset_in_order(goal):
    script = {("select", "2"): {"selected": [{"id": "b", "reason": "r"}, {"id": "d", "reason": "r"}]}}
    out, _ = invoke_select(ScriptedBackend(script), select_request(goal, list("abcde")), CFG, 5)
    assert out.selected_ids == ("b", "d")


def test_select_duplicates_deduplicated_first_wins(goal):
    script = {("select", "2"): {"selected": ["c", "a", "c"]}}
    out, meta = invoke_select(ScriptedBackend(script), select_request(goal, list("abc")), CFG, 5)
    assert out.selected_ids == ("c", "a")
    assert any("deduplicated" in w for w in meta.warnings)


def test_select_fallback_keeps_coarse_order_truncated(goal):
    backend = ScriptedBackend({("select", "*"): "???"})
    out, meta = invoke_select(backend, select_request(goal, list("abcde")), CFG, 2)
    assert meta.fallback
    assert out.selected_ids == ("a", "b")


# --- judge --------------------------------------------------------------------


def test_judge_fixed_verdict():
    script = {("judge", "quality"): {"score": 7}}
    req = JudgeRequest(rubric="quality", context_text="ctx", score_min=0, score_max=10)
    for _ in range(3):
        verdict, _ = invoke_judge(ScriptedBackend(script), req, CFG)
        assert verdict.score == 7.0


def test_judge_score_clamped_to_rubric_range():
    script = {("judge", "vam"): {"score": 5}}
    req = JudgeRequest(rubric="vam", context_text="ctx", score_min=0, score_max=3)
    verdict, meta = invoke_judge(ScriptedBackend(script), req, CFG)
    assert verdict.score == 3.0
    assert any("clamped" in w for w in meta.warnings)


def test_judge_pairwise_modes():
    script = {("judge", "pref"): {"preferred": "B", "margin": 2}}
    req = JudgeRequest(rubric="pref", context_text="ctx", pairwise=True)
    verdict, _ = invoke_judge(ScriptedBackend(script), req, CFG)
    assert verdict.preferred == "B"
    assert verdict.score == 2.0


def test_judge_failure_raises_never_imputes():
    backend = ScriptedBackend({("judge", "pref"): "mumble"})
    req = JudgeRequest(rubric="pref", context_text="ctx", pairwise=True)
    with pytest.raises(ParseFailure):
        invoke_judge(backend, req, CFG)


# --- backbone action parsing ---------------------------------------------------


@pytest.mark.parametrize(
    "text, kind",
    [
        ("click(0.5,0.5)", ActionKind.CLICK),
        ("click(x=0.25, y=0.75)", ActionKind.CLICK),
        ("long_press(0.1, 0.9)", ActionKind.LONG_PRESS),
        ("complete", ActionKind.COMPLETE),
        ("navigate_back", ActionKind.NAVIGATE_BACK),
        ("wait", ActionKind.WAIT),
    ],
)
def test_parse_action_kinds(text, kind):
    assert parse_action(text).kind is kind


def test_parse_action_click_point():
    action = parse_action("click(0.5, 0.5)")
    assert action.point == (0.5, 0.5)


def test_parse_action_scroll_direction():
    assert parse_action("scroll(down)").direction is ScrollDirection.DOWN


def test_parse_action_type_text():
    action = parse_action('type_text("Hello World")')
    assert action.kind is ActionKind.TYPE_TEXT
    assert action.text == "Hello World"


def test_parse_action_prose_degrades_to_other():
    action = parse_action("I think we should probably open the settings app")
    assert action.kind is ActionKind.OTHER
    assert "settings" in action.raw


def test_parse_action_out_of_range_point_is_other():
    assert parse_action("click(1.5, 0.5)").kind is ActionKind.OTHER


def test_format_action_round_trip():
    for text in ["click(0.5, 0.25)", "scroll(left)", 'type_text("hi there")', "complete"]:
        action = parse_action(text)
        assert parse_action(format_action(action)) == action


def test_predict_action_via_scripted_backbone():
    backend = ScriptedBackend({("backbone", "1"): "click(0.5,0.5)"})
    action, meta = predict_action(backend, "1", [{"role": "user", "content": []}], CFG)
    assert action.kind is ActionKind.CLICK
    assert action.point == (0.5, 0.5)
    assert meta.role == "backbone"


def test_scripted_backbone_default_is_wait():
    action, _ = predict_action(ScriptedBackend(), "9", [{"role": "user", "content": []}], CFG)
    assert action.kind is ActionKind.WAIT


# --- embedder --------------------------------------------------------------------


def test_hash_embedder_text_determinism():
    emb = HashEmbedder(dim=16)
    a = emb.embed_text("open settings")
    b = emb.embed_text("open settings")
    assert a == b
    assert abs(float(np.linalg.norm(a.values.astype(np.float64))) - 1.0) <= 1e-6


def test_hash_embedder_distinct_texts_not_parallel():
    emb = HashEmbedder(dim=16)
    a = emb.embed_text("open settings")
    b = emb.embed_text("close settings")
    assert cosine(a, b) < 1.0


def test_hash_embedder_image_determinism():
    emb = HashEmbedder(dim=8)
    shot = make_screenshot(step=1)
    assert emb.embed_image(shot.pixels) == emb.embed_image(shot.pixels)


# --- remote client ---------------------------------------------------------------


class FakeResponse:
    def __init__(self, status_code=200, payload=None):
        self.status_code = status_code
        self._payload = payload or {}

    def json(self):
        return self._payload


class FakeSession:
    def __init__(self, response):
        self.response = response
        self.requests = []

    def post(self, url, json=None, headers=None, timeout=None):
        self.requests.append({"url": url, "json": json, "headers": headers, "timeout": timeout})
        if isinstance(self.response, Exception):
            raise self.response
        return self.response


def remote(session, audit_path=None):
    cfg = BackendConfig(endpoint="http://unit.test/v1/chat/completions", model="m", timeout=5)
    return RemoteChatBackend(cfg, session=session, audit_path=audit_path)


def test_remote_backend_wire_format(goal, tmp_path):
    payload = {
        "choices": [{"message": {"content": '{"salience": 0.2, "summary": "", "retrieve": 0}'}}],
        "usage": {"prompt_tokens": 11, "completion_tokens": 7},
    }
    session = FakeSession(FakeResponse(payload=payload))
    backend = remote(session, audit_path=tmp_path / "audit.jsonl")
    messages = step_messages(step_request(goal))
    reply = backend.complete("step", "3", messages)
    assert reply.tokens_in == 11 and reply.tokens_out == 7

    sent = session.requests[0]["json"]
    assert sent["model"] == "m"
    user = sent["messages"][1]
    kinds = [p["type"] for p in user["content"]]
    assert kinds == ["text", "image_url"]
    assert user["content"][1]["image_url"]["url"].startswith("data:image/png;base64,")

    audit_lines = (tmp_path / "audit.jsonl").read_text().splitlines()
    assert len(audit_lines) == 1
    assert json.loads(audit_lines[0])["role"] == "step"


def test_remote_backend_http_error_is_transport_failure(goal):
    backend = remote(FakeSession(FakeResponse(status_code=500)))
    with pytest.raises(TransportFailure):
        backend.complete("step", "1", step_messages(step_request(goal)))


def test_remote_backend_network_error_is_transport_failure(goal):
    import requests

    backend = remote(FakeSession(requests.ConnectionError("refused")))
    with pytest.raises(TransportFailure):
        backend.complete("step", "1", step_messages(step_request(goal)))


def test_remote_backend_malformed_body_is_transport_failure(goal):
    backend = remote(FakeSession(FakeResponse(payload={"nope": 1})))
    with pytest.raises(TransportFailure):
        backend.complete("step", "1", step_messages(step_request(goal)))


def test_malformed_reply_constant_never_parses():
    with pytest.raises(ParseFailure):
        extract_json_object(MALFORMED_REPLY)
