"""Typed request/output contracts for the model roles, plus the structured
reply parser.

Every model reply is a structured JSON object embedded somewhere in the
reply text; ``extract_json_object`` locates the first balanced object and
the per-role ``parse_*`` functions validate and normalize it. Downstream
modules never see free text. The object layout is versioned via
SCHEMA_VERSION; bump it when a field changes meaning.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from ..core import Action, BBox, Screenshot, TaskGoal, validate_bbox

SCHEMA_VERSION = 1

ROLE_STEP = "step"
ROLE_COMPRESS = "compress"
ROLE_WRITE = "write"
ROLE_SELECT = "select"
ROLE_BACKBONE = "backbone"
ROLE_JUDGE = "judge"

OUTCOMES = ("success", "failure", "unknown")


class ParseFailure(ValueError):
    """Reply text did not yield a schema-valid object."""


class TransportFailure(RuntimeError):
    """The backend endpoint could not be reached or errored."""


class DimensionMismatch(ValueError):
    """Embedder dimension disagrees with the consumer's declared dim."""


@dataclass(frozen=True)
class BackendConfig:
    """Connection and retry policy for one model role."""

    endpoint: str = ""
    model: str = ""
    timeout: float = 60.0
    max_retries: int = 2
    temperature: float = 0.0
    image_detail: str = "auto"
    api_key_env: str = "GUIMEM_API_KEY"

    def __post_init__(self):
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")


@dataclass(frozen=True)
class StepRequest:
    goal: TaskGoal
    screenshot: Screenshot
    prev_action: Action | None
    wm_text: str


@dataclass(frozen=True)
class StepOutput:
    salience: float
    summary: str
    roi: BBox | None
    retrieve: int

    def to_dict(self) -> dict:
        return {
            "salience": self.salience,
            "summary": self.summary,
            "roi": self.roi.as_list() if self.roi else None,
            "retrieve": self.retrieve,
        }


FALLBACK_STEP_OUTPUT = StepOutput(salience=0.0, summary="", roi=None, retrieve=0)


@dataclass(frozen=True)
class CompressEntry:
    """What the compressor sees of one working-memory entry."""

    step: int
    summary: str
    roi_ids: tuple[str, ...] = ()


@dataclass(frozen=True)
class CompressRequest:
    goal: TaskGoal
    entries: tuple[CompressEntry, ...]

    def __post_init__(self):
        if not self.entries:
            raise ValueError("compress request needs at least one entry")


@dataclass(frozen=True)
class CompressOutput:
    summary: str
    retained_rois: tuple[str, ...]

    def to_dict(self) -> dict:
        return {"summary": self.summary, "retained_rois": list(self.retained_rois)}


@dataclass(frozen=True)
class WriteRequest:
    goal: TaskGoal
    outcome: str
    entries: tuple[CompressEntry, ...]
    roi_ids: tuple[str, ...]

    def __post_init__(self):
        if self.outcome not in OUTCOMES:
            raise ValueError(f"unknown outcome {self.outcome!r}")


@dataclass(frozen=True)
class WriteOutput:
    summary: str
    key_actions: tuple[str, ...]
    outcome: str
    retained_rois: tuple[str, ...]

    def to_dict(self) -> dict:
        return {
            "summary": self.summary,
            "key_actions": list(self.key_actions),
            "outcome": self.outcome,
            "retained_rois": list(self.retained_rois),
        }


@dataclass(frozen=True)
class SelectCandidate:
    entry_id: str
    summary: str
    outcome: str
    key_actions: tuple[str, ...] = ()
    roi_count: int = 0


@dataclass(frozen=True)
class SelectRequest:
    goal: TaskGoal
    screenshot: Screenshot
    candidates: tuple[SelectCandidate, ...]


@dataclass(frozen=True)
class SelectOutput:
    selected_ids: tuple[str, ...]
    reasons: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "selected": [
                {"id": cid, "reason": self.reasons.get(cid, "")} for cid in self.selected_ids
            ]
        }


@dataclass(frozen=True)
class JudgeRequest:
    rubric: str
    context_text: str
    pairwise: bool = False
    score_min: float = 0.0
    score_max: float = 10.0
    images: tuple = ()


@dataclass(frozen=True)
class JudgeVerdict:
    score: float | None = None
    preferred: str | None = None  # "A" | "B" | "tie" in pairwise mode
    rationale: str = ""


def extract_json_object(text: str) -> dict:
    """Locate and decode the first balanced JSON object in ``text``."""
    if not isinstance(text, str):
        raise ParseFailure("reply is not text")
    start = text.find("{")
    while start != -1:
        depth = 0
        in_string = False
        escaped = False
        for i in range(start, len(text)):
            ch = text[i]
            if in_string:
                if escaped:
                    escaped = False
                elif ch == "\\":
                    escaped = True
                elif ch == '"':
                    in_string = False
                continue
            if ch == '"':
                in_string = True
            elif ch == "{":
                depth += 1
            elif ch == "}":
                depth -= 1
                if depth == 0:
                    candidate = text[start : i + 1]
                    try:
                        obj = json.loads(candidate)
                    except json.JSONDecodeError:
                        break
                    if isinstance(obj, dict):
                        return obj
                    break
        start = text.find("{", start + 1)
    raise ParseFailure("no balanced JSON object in reply")


def _require(obj: dict, key: str):
    if key not in obj:
        raise ParseFailure(f"missing field {key!r}")
    return obj[key]


def parse_step_output(obj: dict) -> tuple[StepOutput, list[str]]:
    """Validate a step-operator object; returns (output, warnings)."""
    warnings: list[str] = []
    raw_salience = _require(obj, "salience")
    if not isinstance(raw_salience, (int, float)) or isinstance(raw_salience, bool):
        raise ParseFailure("salience must be a number")
    salience = float(raw_salience)
    if salience < 0.0 or salience > 1.0:
        clamped = min(1.0, max(0.0, salience))
        warnings.append(f"salience {salience} clamped to {clamped}")
        salience = clamped
    summary = obj.get("summary", "")
    if not isinstance(summary, str):
        raise ParseFailure("summary must be a string")
    if salience > 0.0 and not summary.strip():
        raise ParseFailure("summary required when salience > 0")
    roi = None
    raw_roi = obj.get("roi")
    if raw_roi is not None:
        if not isinstance(raw_roi, (list, tuple)) or len(raw_roi) != 4:
            raise ParseFailure("roi must be a 4-element array or null")
        try:
            box = BBox.from_list(raw_roi)
        except (TypeError, ValueError) as exc:
            raise ParseFailure(f"roi not numeric: {exc}") from exc
        violations = validate_bbox(box)
        if violations:
            warnings.append(f"roi {raw_roi} dropped: {'; '.join(violations)}")
        else:
            roi = box
    raw_retrieve = obj.get("retrieve", 0)
    if isinstance(raw_retrieve, bool):
        retrieve = int(raw_retrieve)
    elif isinstance(raw_retrieve, (int, float)) and raw_retrieve in (0, 1):
        retrieve = int(raw_retrieve)
    else:
        raise ParseFailure("retrieve must be 0 or 1")
    return StepOutput(salience=salience, summary=summary, roi=roi, retrieve=retrieve), warnings


def parse_compress_output(
    obj: dict, valid_ids: tuple[str, ...], max_retained: int
) -> tuple[CompressOutput, list[str]]:
    """Validate a compression object against the input identifiers."""
    warnings: list[str] = []
    summary = _require(obj, "summary")
    if not isinstance(summary, str):
        raise ParseFailure("summary must be a string")
    raw_ids = obj.get("retained_rois", [])
    if not isinstance(raw_ids, list) or not all(isinstance(x, str) for x in raw_ids):
        raise ParseFailure("retained_rois must be a list of strings")
    known = set(valid_ids)
    retained: list[str] = []
    for rid in raw_ids:
        if rid not in known:
            warnings.append(f"unknown roi id {rid!r} dropped")
        elif rid in retained:
            warnings.append(f"duplicate roi id {rid!r} dropped")
        else:
            retained.append(rid)
    if len(retained) > max_retained:
        warnings.append(f"retained_rois truncated from {len(retained)} to {max_retained}")
        retained = retained[:max_retained]
    return CompressOutput(summary=summary, retained_rois=tuple(retained)), warnings


def parse_write_output(
    obj: dict, request: WriteRequest, max_retained: int
) -> tuple[WriteOutput, list[str]]:
    warnings: list[str] = []
    summary = _require(obj, "summary")
    if not isinstance(summary, str) or not summary.strip():
        raise ParseFailure("summary must be a non-empty string")
    key_actions = obj.get("key_actions", [])
    if not isinstance(key_actions, list) or not all(isinstance(x, str) for x in key_actions):
        raise ParseFailure("key_actions must be a list of strings")
    outcome = obj.get("outcome", request.outcome)
    if outcome not in OUTCOMES:
        raise ParseFailure(f"outcome must be one of {OUTCOMES}")
    if outcome != request.outcome:
        warnings.append(
            f"outcome echo {outcome!r} overwritten by request value {request.outcome!r}"
        )
        outcome = request.outcome
    raw_ids = obj.get("retained_rois", [])
    if not isinstance(raw_ids, list) or not all(isinstance(x, str) for x in raw_ids):
        raise ParseFailure("retained_rois must be a list of strings")
    known = set(request.roi_ids)
    retained: list[str] = []
    for rid in raw_ids:
        if rid not in known:
            warnings.append(f"unknown roi id {rid!r} dropped")
        elif rid in retained:
            warnings.append(f"duplicate roi id {rid!r} dropped")
        else:
            retained.append(rid)
    if len(retained) > max_retained:
        warnings.append(f"retained_rois truncated from {len(retained)} to {max_retained}")
        retained = retained[:max_retained]
    return (
        WriteOutput(
            summary=summary,
            key_actions=tuple(key_actions),
            outcome=outcome,
            retained_rois=tuple(retained),
        ),
        warnings,
    )


def parse_select_output(obj: dict, candidate_ids: tuple[str, ...]) -> tuple[SelectOutput, list[str]]:
    warnings: list[str] = []
    raw = _require(obj, "selected")
    if not isinstance(raw, list):
        raise ParseFailure("selected must be a list")
    known = set(candidate_ids)
    ids: list[str] = []
    reasons: dict[str, str] = {}
    for item in raw:
        if isinstance(item, str):
            cid, reason = item, ""
        elif isinstance(item, dict) and isinstance(item.get("id"), str):
            cid, reason = item["id"], str(item.get("reason", ""))
        else:
            raise ParseFailure("selected items must be ids or {id, reason} objects")
        if cid not in known:
            warnings.append(f"unknown candidate id {cid!r} dropped")
        elif cid in ids:
            warnings.append(f"duplicate candidate id {cid!r} deduplicated")
        else:
            ids.append(cid)
            reasons[cid] = reason
    return SelectOutput(selected_ids=tuple(ids), reasons=reasons), warnings


def parse_judge_verdict(obj: dict, request: JudgeRequest) -> tuple[JudgeVerdict, list[str]]:
    warnings: list[str] = []
    rationale = str(obj.get("rationale", ""))
    if request.pairwise:
        preferred = _require(obj, "preferred")
        if preferred not in ("A", "B", "tie"):
            raise ParseFailure("preferred must be A, B, or tie")
        score = obj.get("margin")
        if score is not None and not isinstance(score, (int, float)):
            raise ParseFailure("margin must be a number when present")
        return (
            JudgeVerdict(score=float(score) if score is not None else None,
                         preferred=preferred, rationale=rationale),
            warnings,
        )
    raw_score = _require(obj, "score")
    if not isinstance(raw_score, (int, float)) or isinstance(raw_score, bool):
        raise ParseFailure("score must be a number")
    score = float(raw_score)
    if score < request.score_min or score > request.score_max:
        clamped = min(request.score_max, max(request.score_min, score))
        warnings.append(f"score {score} clamped to rubric range -> {clamped}")
        score = clamped
    return JudgeVerdict(score=score, preferred=None, rationale=rationale), warnings
