"""Operator invocation layer: prompt the backend, parse the structured
reply, retry on parse failures, and fall back conservatively when retries
run out.

Fallbacks never fabricate memory content: a failed step write stays silent,
a failed compression keeps only the most recent identifier, a failed
episodic write reduces to goal+outcome. A missed write is cheaper than a
corrupted memory. Transport failures are never retried here; they abort the
episode upstream.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

from . import prompts
from .actions import parse_action
from .schemas import (
    FALLBACK_STEP_OUTPUT,
    BackendConfig,
    CompressOutput,
    CompressRequest,
    JudgeRequest,
    JudgeVerdict,
    ParseFailure,
    SelectOutput,
    SelectRequest,
    StepOutput,
    StepRequest,
    WriteOutput,
    WriteRequest,
    ROLE_BACKBONE,
    ROLE_COMPRESS,
    ROLE_JUDGE,
    ROLE_SELECT,
    ROLE_STEP,
    ROLE_WRITE,
    extract_json_object,
    parse_compress_output,
    parse_judge_verdict,
    parse_select_output,
    parse_step_output,
    parse_write_output,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CallMeta:
    """Accounting for one logical operator call (across retries)."""

    role: str
    key: str
    attempts: int
    tokens_in: int
    tokens_out: int
    fallback: bool = False
    warnings: tuple[str, ...] = ()


def _attempt_loop(backend, role, key, messages, parse_fn, config: BackendConfig):
    """Returns (output, meta) or (None, meta) when every attempt misparsed."""
    max_attempts = config.max_retries + 1
    tokens_in = tokens_out = 0
    warnings: list[str] = []
    for attempt in range(1, max_attempts + 1):
        reply = backend.complete(role, key, messages)
        tokens_in += reply.tokens_in
        tokens_out += reply.tokens_out
        try:
            obj = extract_json_object(reply.text)
            output, parse_warnings = parse_fn(obj)
        except ParseFailure as exc:
            warnings.append(f"attempt {attempt} parse failure: {exc}")
            log.warning("%s[%s] attempt %d parse failure: %s", role, key, attempt, exc)
            continue
        warnings.extend(parse_warnings)
        for w in parse_warnings:
            log.warning("%s[%s]: %s", role, key, w)
        meta = CallMeta(role, key, attempt, tokens_in, tokens_out, False, tuple(warnings))
        return output, meta
    warnings.append(f"fallback after {max_attempts} attempts")
    log.warning("%s[%s] fell back after %d attempts", role, key, max_attempts)
    meta = CallMeta(role, key, max_attempts, tokens_in, tokens_out, True, tuple(warnings))
    return None, meta


def invoke_step(backend, req: StepRequest, config: BackendConfig) -> tuple[StepOutput, CallMeta]:
    key = str(req.screenshot.step_index)
    messages = prompts.step_messages(req)
    output, meta = _attempt_loop(backend, ROLE_STEP, key, messages, parse_step_output, config)
    if output is None:
        return FALLBACK_STEP_OUTPUT, meta
    return output, meta


def invoke_compress(
    backend, req: CompressRequest, config: BackendConfig, max_retained: int
) -> tuple[CompressOutput, CallMeta]:
    key = f"{req.entries[0].step}-{req.entries[-1].step}"
    valid_ids = tuple(rid for e in req.entries for rid in e.roi_ids)
    messages = prompts.compress_messages(req)
    output, meta = _attempt_loop(
        backend,
        ROLE_COMPRESS,
        key,
        messages,
        lambda obj: parse_compress_output(obj, valid_ids, max_retained),
        config,
    )
    if output is None:
        summary = " | ".join(e.summary[:80] for e in req.entries if e.summary)[:400]
        retained = (valid_ids[-1],) if valid_ids else ()
        return CompressOutput(summary=summary or "earlier steps", retained_rois=retained), meta
    return output, meta


def invoke_write(
    backend, req: WriteRequest, config: BackendConfig, max_retained: int = 3
) -> tuple[WriteOutput, CallMeta]:
    key = req.goal.text
    messages = prompts.write_messages(req)
    output, meta = _attempt_loop(
        backend,
        ROLE_WRITE,
        key,
        messages,
        lambda obj: parse_write_output(obj, req, max_retained),
        config,
    )
    if output is None:
        retained = (req.roi_ids[0],) if req.roi_ids else ()
        return (
            WriteOutput(
                summary=f"{req.goal.text} ({req.outcome})",
                key_actions=(),
                outcome=req.outcome,
                retained_rois=retained,
            ),
            meta,
        )
    return output, meta


def invoke_select(
    backend, req: SelectRequest, config: BackendConfig, max_selected: int
) -> tuple[SelectOutput, CallMeta]:
    key = str(req.screenshot.step_index)
    candidate_ids = tuple(c.entry_id for c in req.candidates)
    if not candidate_ids:
        return SelectOutput(selected_ids=(), reasons={}), CallMeta(
            ROLE_SELECT, key, 0, 0, 0, False, ()
        )
    messages = prompts.select_messages(req)
    output, meta = _attempt_loop(
        backend,
        ROLE_SELECT,
        key,
        messages,
        lambda obj: parse_select_output(obj, candidate_ids),
        config,
    )
    if output is None:
        # candidates arrive in coarse-retrieval score order already
        return SelectOutput(selected_ids=candidate_ids[:max_selected], reasons={}), meta
    return output, meta


def invoke_judge(backend, req: JudgeRequest, config: BackendConfig) -> tuple[JudgeVerdict, CallMeta]:
    """Raises ParseFailure when retries run out: judge scores are never imputed."""
    messages = prompts.judge_messages(req)
    output, meta = _attempt_loop(
        backend,
        ROLE_JUDGE,
        req.rubric,
        messages,
        lambda obj: parse_judge_verdict(obj, req),
        config,
    )
    if output is None:
        raise ParseFailure(f"judge[{req.rubric}] failed after {meta.attempts} attempts")
    return output, meta


def predict_action(backend, key: str, messages: list[dict], config: BackendConfig):
    """Ask the GUI backbone for the next action. Unparseable replies become
    Action(kind=other) so scoring can count them as misses."""
    reply = backend.complete(ROLE_BACKBONE, key, messages)
    action = parse_action(reply.text)
    meta = CallMeta(ROLE_BACKBONE, key, 1, reply.tokens_in, reply.tokens_out, False, ())
    return action, meta
