"""Prompt templates and message builders for the model roles.

Templates are editable assets, not fixed behavior: tune the wording freely,
but keep the trailing schema contract in sync with ``schemas.py`` (replies
must carry one JSON object in the documented layout). Each builder serializes
the request payload as JSON inside the user message so the reply can be
validated against exactly what was asked.

Message shape used throughout: ``{"role": ..., "content": [part, ...]}``
where a part is ``{"type": "text", "text": str}`` or
``{"type": "image", "pixels": ndarray, "ref": str}``.
"""

from __future__ import annotations

import json

import numpy as np

from ..core import pixel_identifier
from .schemas import (
    CompressRequest,
    JudgeRequest,
    SelectRequest,
    StepRequest,
    WriteRequest,
)

STEP_SYSTEM_PROMPT = """\
You watch a GUI automation episode one screenshot at a time and decide what
is worth remembering. Given the task, the previous action, the current
working memory, and the new screenshot, reply with one JSON object:
{"salience": <0..1, how much this frame should be written to memory>,
 "summary": "<one concise sentence describing the interface event>",
 "roi": [x_min, y_min, x_max, y_max] or null  (normalized coords of the changed region),
 "retrieve": 0 or 1  (1 if past experience should be re-consulted now)}
Reply with the JSON object only."""

COMPRESS_SYSTEM_PROMPT = """\
You consolidate older working-memory entries of a GUI episode into one
compact block. Keep what still matters for finishing the task. Reply with
one JSON object:
{"summary": "<compact summary of the given entries>",
 "retained_rois": ["<roi id>", ...]  (ids chosen from the listed entries; keep the most useful)}
Reply with the JSON object only."""

WRITE_SYSTEM_PROMPT = """\
You turn a finished GUI episode into one compact reusable memory. Reply with
one JSON object:
{"summary": "<what was attempted and what happened>",
 "key_actions": ["<pivotal action>", ...],
 "outcome": "success" | "failure" | "unknown",
 "retained_rois": ["<roi id>", ...]  (subset of the offered ids)}
Reply with the JSON object only."""

SELECT_SYSTEM_PROMPT = """\
You filter retrieved past-episode memories by relevance to the current GUI
task state. Keep only entries that would help choose the next action, most
relevant first. Reply with one JSON object:
{"selected": [{"id": "<candidate id>", "reason": "<why it helps>"}, ...]}
An empty list is a valid answer. Reply with the JSON object only."""

BACKBONE_SYSTEM_PROMPT = """\
You control a GUI. Given the task, any memory context, reference images,
and the current screenshot (always the last image), reply with exactly one
action from this space:
  click(x, y)          long_press(x, y)       scroll(up|down|left|right)
  type_text("...")     key(name)              open_app(name)
  navigate_back        navigate_home          wait
  complete             (task finished)
Coordinates are normalized to [0, 1]. Reply with the action only."""

JUDGE_SCORE_SYSTEM_PROMPT = """\
You are a strict evaluator of GUI agent behavior. Score the presented
material on the named rubric. Reply with one JSON object:
{"score": <number within the stated range>, "rationale": "<1-2 sentences>"}
Reply with the JSON object only."""

JUDGE_PAIRWISE_SYSTEM_PROMPT = """\
You compare two candidate outputs (A and B) for the same input and pick the
one that better preserves task-relevant state, maintains visual grounding,
and provides useful downstream context. Reply with one JSON object:
{"preferred": "A" | "B" | "tie", "margin": <optional number, how decisive>,
 "rationale": "<1-2 sentences>"}
Reply with the JSON object only."""


def text_part(text: str) -> dict:
    return {"type": "text", "text": text}


def image_part(pixels: np.ndarray, ref: str | None = None) -> dict:
    return {"type": "image", "pixels": pixels, "ref": ref or pixel_identifier(pixels)}


def _payload_text(payload: dict) -> str:
    return json.dumps(payload, ensure_ascii=False, sort_keys=True)


def step_messages(req: StepRequest) -> list[dict]:
    payload = {
        "goal": req.goal.text,
        "step": req.screenshot.step_index,
        "prev_action": req.prev_action.raw if req.prev_action else None,
        "working_memory": req.wm_text,
    }
    return [
        {"role": "system", "content": [text_part(STEP_SYSTEM_PROMPT)]},
        {
            "role": "user",
            "content": [text_part(_payload_text(payload)), image_part(req.screenshot.pixels)],
        },
    ]


def compress_messages(req: CompressRequest) -> list[dict]:
    payload = {
        "goal": req.goal.text,
        "entries": [
            {"step": e.step, "summary": e.summary, "roi_ids": list(e.roi_ids)}
            for e in req.entries
        ],
    }
    return [
        {"role": "system", "content": [text_part(COMPRESS_SYSTEM_PROMPT)]},
        {"role": "user", "content": [text_part(_payload_text(payload))]},
    ]


def write_messages(req: WriteRequest) -> list[dict]:
    payload = {
        "goal": req.goal.text,
        "outcome": req.outcome,
        "entries": [
            {"step": e.step, "summary": e.summary, "roi_ids": list(e.roi_ids)}
            for e in req.entries
        ],
        "roi_ids": list(req.roi_ids),
    }
    return [
        {"role": "system", "content": [text_part(WRITE_SYSTEM_PROMPT)]},
        {"role": "user", "content": [text_part(_payload_text(payload))]},
    ]


def select_messages(req: SelectRequest) -> list[dict]:
    payload = {
        "goal": req.goal.text,
        "step": req.screenshot.step_index,
        "candidates": [
            {
                "id": c.entry_id,
                "summary": c.summary,
                "outcome": c.outcome,
                "key_actions": list(c.key_actions),
                "roi_count": c.roi_count,
            }
            for c in req.candidates
        ],
    }
    return [
        {"role": "system", "content": [text_part(SELECT_SYSTEM_PROMPT)]},
        {
            "role": "user",
            "content": [text_part(_payload_text(payload)), image_part(req.screenshot.pixels)],
        },
    ]


def judge_messages(req: JudgeRequest) -> list[dict]:
    system = JUDGE_PAIRWISE_SYSTEM_PROMPT if req.pairwise else JUDGE_SCORE_SYSTEM_PROMPT
    payload = {
        "rubric": req.rubric,
        "range": [req.score_min, req.score_max],
        "pairwise": req.pairwise,
        "context": req.context_text,
    }
    parts = [text_part(_payload_text(payload))]
    parts.extend(image_part(px) for px in req.images)
    return [
        {"role": "system", "content": [text_part(system)]},
        {"role": "user", "content": parts},
    ]


def messages_text(messages: list[dict]) -> str:
    """All text parts of a message sequence, joined; used for token estimates."""
    chunks: list[str] = []
    for msg in messages:
        for part in msg.get("content", []):
            if part.get("type") == "text":
                chunks.append(part["text"])
    return "\n".join(chunks)


def first_user_payload(messages: list[dict]) -> dict | None:
    """Recover the JSON request payload a builder embedded in the user turn.

    Scripted role defaults use this to echo request content (e.g. retained
    roi ids must be a subset of the offered ids).
    """
    for msg in messages:
        if msg.get("role") != "user":
            continue
        for part in msg.get("content", []):
            if part.get("type") == "text":
                try:
                    obj = json.loads(part["text"])
                except (json.JSONDecodeError, TypeError):
                    continue
                if isinstance(obj, dict):
                    return obj
    return None
