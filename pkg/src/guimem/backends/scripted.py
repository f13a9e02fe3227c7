"""Deterministic scripted backend: canned replies for tests and fully
offline runs, plus a seeded procedural script for smoke/demo episodes.

A script maps ``(role, key)`` to a canned reply. Key conventions per role:
step/select/backbone use ``str(step_index)``, compress uses
``"{first_step}-{last_step}"``, write uses the goal text, judge uses the
rubric id. ``(role, "*")`` is a wildcard consulted after exact keys.

A script value may be:
  - a dict: JSON-dumped and returned as the reply text,
  - a str: returned verbatim (useful for malformed-reply tests),
  - a callable ``f(key, payload, call_count) -> dict | str`` where payload
    is the JSON request the prompt builder embedded in the user turn.

Replies are deterministic given (role, key, call count, request); the only
internal state is the per-(role, key) call counter that drives flaky mode.
"""

from __future__ import annotations

import hashlib
import json
from collections import Counter
from dataclasses import dataclass

from .prompts import first_user_payload, messages_text
from .schemas import (
    ROLE_BACKBONE,
    ROLE_COMPRESS,
    ROLE_JUDGE,
    ROLE_SELECT,
    ROLE_STEP,
    ROLE_WRITE,
)

MALFORMED_REPLY = "sorry, I cannot produce structured output right now"

_IMAGE_TOKENS = 170  # flat per-image charge for deterministic accounting


@dataclass(frozen=True)
class Reply:
    text: str
    tokens_in: int
    tokens_out: int


def _count_images(messages: list[dict]) -> int:
    return sum(
        1 for m in messages for p in m.get("content", []) if p.get("type") == "image"
    )


def _default_step(payload: dict | None) -> dict:
    return {"salience": 0.0, "summary": "", "roi": None, "retrieve": 0}


def _default_compress(payload: dict | None) -> dict:
    entries = (payload or {}).get("entries", [])
    summaries = [e.get("summary", "") for e in entries if e.get("summary")]
    ids = [rid for e in entries for rid in e.get("roi_ids", [])]
    return {
        "summary": " | ".join(summaries)[:400] or "consolidated earlier steps",
        "retained_rois": ids[-2:],
    }


def _default_write(payload: dict | None) -> dict:
    payload = payload or {}
    goal = payload.get("goal", "")
    outcome = payload.get("outcome", "unknown")
    entries = payload.get("entries", [])
    key_actions = [e.get("summary", "") for e in entries if e.get("summary")][-3:]
    return {
        "summary": f"{goal} ({outcome})" if goal else f"episode ended ({outcome})",
        "key_actions": key_actions,
        "outcome": outcome,
        "retained_rois": list(payload.get("roi_ids", [])),
    }


def _default_select(payload: dict | None) -> dict:
    candidates = (payload or {}).get("candidates", [])
    return {
        "selected": [
            {"id": c.get("id", ""), "reason": "kept in offered order"} for c in candidates
        ]
    }


def _default_judge(payload: dict | None) -> dict:
    if payload and payload.get("pairwise"):
        return {"preferred": "tie", "rationale": "no scripted preference"}
    lo = (payload or {}).get("range", [0.0, 10.0])[0]
    return {"score": lo, "rationale": "no scripted verdict"}


_ROLE_DEFAULTS = {
    ROLE_STEP: _default_step,
    ROLE_COMPRESS: _default_compress,
    ROLE_WRITE: _default_write,
    ROLE_SELECT: _default_select,
    ROLE_JUDGE: _default_judge,
}


class ScriptedBackend:
    def __init__(self, script: dict | None = None, flaky: dict | None = None):
        self._script = dict(script or {})
        self._flaky = dict(flaky or {})
        self._calls: Counter = Counter()

    def call_count(self, role: str, key: str) -> int:
        return self._calls[(role, key)]

    def complete(self, role: str, key: str, messages: list[dict]) -> Reply:
        self._calls[(role, key)] += 1
        n = self._calls[(role, key)]
        prompt_text = messages_text(messages)
        tokens_in = len(prompt_text) // 4 + _IMAGE_TOKENS * _count_images(messages)

        fail_budget = self._flaky.get((role, key), self._flaky.get((role, "*"), 0))
        if n <= fail_budget:
            return Reply(MALFORMED_REPLY, tokens_in, len(MALFORMED_REPLY) // 4)

        entry = self._script.get((role, key), self._script.get((role, "*")))
        payload = first_user_payload(messages)
        if payload is None:
            # roles prompted with plain text (the backbone) still get a
            # deterministic handle on their input
            payload = {"text": prompt_text}
        if entry is None:
            if role == ROLE_BACKBONE:
                value: dict | str = "wait"
            else:
                value = _ROLE_DEFAULTS[role](payload)
        elif callable(entry):
            value = entry(key, payload, n)
        else:
            value = entry
        text = value if isinstance(value, str) else json.dumps(value, ensure_ascii=False)
        return Reply(text, tokens_in, len(text) // 4)


def _hash_int(*parts) -> int:
    digest = hashlib.sha256(":".join(str(p) for p in parts).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def offline_script(seed: int) -> dict:
    """Seeded wildcard script giving offline runs lively, plausible behavior:
    roughly 40% of steps are salient with an ROI, episodic retrieval fires
    periodically, the backbone mixes clicks/scrolls and occasionally declares
    the task complete, and the judge returns mid-scale scores."""

    def step_policy(key: str, payload: dict | None, n: int):
        goal = (payload or {}).get("goal", "")
        t = (payload or {}).get("step", key)
        h = _hash_int(seed, "step", goal, t)
        if h % 10 < 4:
            qx = 0.1 + 0.2 * ((h >> 8) % 4)
            qy = 0.1 + 0.2 * ((h >> 16) % 4)
            return {
                "salience": 0.9,
                "summary": f"interface changed after step {t}",
                "roi": [round(qx, 3), round(qy, 3), round(qx + 0.15, 3), round(qy + 0.15, 3)],
                "retrieve": 1 if h % 5 == 0 else 0,
            }
        return {"salience": 0.15, "summary": "routine transition", "roi": None,
                "retrieve": 1 if h % 7 == 0 else 0}

    def backbone_policy(key: str, payload: dict | None, n: int):
        # hash the whole prompt so goal AND memory context steer the action:
        # different strategies then act differently, still deterministically
        text = (payload or {}).get("text", "")
        h = _hash_int(seed, "backbone", key, n, text)
        roll = h % 8
        if roll == 0:
            return "complete"
        if roll in (1, 2):
            return "scroll(down)"
        x = ((h >> 8) % 1000) / 1000.0
        y = ((h >> 24) % 1000) / 1000.0
        return f"click({x:.3f}, {y:.3f})"

    def judge_policy(key: str, payload: dict | None, n: int):
        payload = payload or {}
        h = _hash_int(seed, "judge", key, n)
        if payload.get("pairwise"):
            return {"preferred": "A" if h % 2 == 0 else "B", "margin": 1 + h % 3,
                    "rationale": "scripted comparison"}
        lo, hi = payload.get("range", [0.0, 10.0])
        return {"score": round(lo + (hi - lo) * (0.4 + 0.05 * (h % 9)), 2),
                "rationale": "scripted rubric score"}

    return {
        (ROLE_STEP, "*"): step_policy,
        (ROLE_BACKBONE, "*"): backbone_policy,
        (ROLE_JUDGE, "*"): judge_policy,
    }
