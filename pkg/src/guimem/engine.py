"""Per-step orchestration and episode lifecycle.

One step runs in a fixed order: step operator (seeing the memory committed
at t-1), gated append, capacity compression, episodic refresh, input
construction, backbone action prediction, then commit. The commit is last
so a transport failure aborts the episode with the pre-action memory intact
for audit.

Also hosts the comparison history strategies (no_history, replay_all,
text_summary) behind the same input-construction surface, an offline replay
frame source, and episode-record persistence. Live environments plug in via
the FrameSource protocol; none ships here.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterator, Protocol, Sequence

from .backends import prompts
from .backends.embedder import Embedder, HashEmbedder
from .backends.invoke import CallMeta, invoke_step, predict_action
from .backends.schemas import (
    ROLE_BACKBONE,
    ROLE_COMPRESS,
    ROLE_JUDGE,
    ROLE_SELECT,
    ROLE_STEP,
    ROLE_WRITE,
    BackendConfig,
    StepOutput,
    StepRequest,
    TransportFailure,
)
from .backends.scripted import ScriptedBackend
from .core import Action, ActionKind, RoiImage, Screenshot, TaskGoal, pixel_identifier
from .episodic import (
    EpisodicBank,
    EpisodicConfig,
    EpisodicContext,
    EpisodicEntry,
    write_episode,
)
from .episodic import refresh_context as episodic_refresh
from .working_memory import (
    WMConfig,
    WorkingMemory,
    apply_step,
    maybe_compress,
    render_text,
    select_roi_refs,
    snapshot,
)

log = logging.getLogger(__name__)

EPISODE_RECORD_VERSION = 1


class StrategyMode(str, Enum):
    NO_HISTORY = "no_history"
    REPLAY_ALL = "replay_all"
    TEXT_SUMMARY = "text_summary"
    WM_ONLY = "wm_only"
    WM_PLUS_EM = "wm_plus_em"


class EpisodeStatus(str, Enum):
    RUNNING = "running"
    SUCCESS = "success"
    FAILURE = "failure"
    ABORTED = "aborted"


@dataclass(frozen=True)
class EngineConfig:
    strategy: StrategyMode = StrategyMode.WM_PLUS_EM
    wm: WMConfig = field(default_factory=WMConfig)
    episodic: EpisodicConfig = field(default_factory=EpisodicConfig)
    episodic_roi_allowance: int = 2
    max_steps: int = 50
    write_back: bool = True
    context_char_budget: int = 6000
    include_past_screenshots: bool = False


class Clock(Protocol):
    def now(self) -> float: ...


class RealClock:
    def now(self) -> float:
        return time.monotonic()


class VirtualClock:
    """Deterministic clock for offline runs: each reading advances 1 ms."""

    def __init__(self):
        self._ticks = 0

    def now(self) -> float:
        self._ticks += 1
        return self._ticks * 0.001


@dataclass
class BackendRig:
    """The six model roles plus the embedder, with per-role wire configs."""

    backends: dict
    configs: dict
    embedder: Embedder

    def backend(self, role: str):
        return self.backends[role]

    def config(self, role: str) -> BackendConfig:
        return self.configs.get(role, BackendConfig())

    @classmethod
    def scripted(
        cls,
        script: dict | None = None,
        flaky: dict | None = None,
        dim: int = 64,
        max_retries: int = 2,
    ) -> "BackendRig":
        backend = ScriptedBackend(script=script, flaky=flaky)
        roles = (ROLE_STEP, ROLE_COMPRESS, ROLE_WRITE, ROLE_SELECT, ROLE_BACKBONE, ROLE_JUDGE)
        cfg = BackendConfig(max_retries=max_retries)
        return cls(
            backends={role: backend for role in roles},
            configs={role: cfg for role in roles},
            embedder=HashEmbedder(dim=dim),
        )


@dataclass(frozen=True)
class MemoryInput:
    """The serialized multimodal context handed to the frozen backbone."""

    screenshot: Screenshot
    memory_images: tuple[RoiImage, ...]
    context_text: str
    accounting: dict

    def digest(self) -> str:
        payload = {
            "context_text": self.context_text,
            "images": [r.identifier for r in self.memory_images],
            "screenshot": pixel_identifier(self.screenshot.pixels),
        }
        return hashlib.sha256(
            json.dumps(payload, sort_keys=True).encode("utf-8")
        ).hexdigest()


@dataclass
class StepRecord:
    step: int
    screenshot_ref: str
    step_output: StepOutput | None
    input_digest: str
    action: Action | None
    tokens_in: int = 0
    tokens_out: int = 0


@dataclass
class EpisodeState:
    goal: TaskGoal
    strategy: StrategyMode
    episode_id: str
    wm: WorkingMemory
    em_context: EpisodicContext = field(default_factory=EpisodicContext)
    running_summary: str = ""
    t: int = 0
    status: EpisodeStatus = EpisodeStatus.RUNNING
    abort_reason: str = ""
    history: list = field(default_factory=list)  # StepRecord per step
    memory_snapshots: list = field(default_factory=list)  # one per step, None when strategy has none
    input_snapshots: list = field(default_factory=list)  # serialized message snapshot per step
    step_digests: list = field(default_factory=list)
    tokens_in: int = 0
    tokens_out: int = 0
    wall_time: float = 0.0
    last_screenshot: Screenshot | None = None
    past_frames: list = field(default_factory=list)  # full-frame RoiImages for replay_all
    written_entry_id: str | None = None

    def prev_action(self) -> Action | None:
        for record in reversed(self.history):
            if record.action is not None:
                return record.action
        return None


TASK_HEADER = "TASK: "
WM_HEADER = "WORKING MEMORY:"
EM_HEADER = "PAST EXPERIENCE:"
HISTORY_HEADER = "HISTORY:"
SECTION_TRUNCATION_MARKER = "[earlier context truncated]"


def baseline_strategy(
    mode: StrategyMode, history: Sequence[StepRecord], running_summary: str = ""
) -> dict:
    """Context pieces for the comparison strategies.

    replay_all replays prior predicted actions verbatim; text_summary is the
    single running summary the step operator maintains (no gating, no ROIs).
    """
    if mode is StrategyMode.REPLAY_ALL:
        lines = [
            f"step {r.step}: {r.action.raw}" for r in history if r.action is not None
        ]
        return {"header": HISTORY_HEADER, "lines": lines}
    if mode is StrategyMode.TEXT_SUMMARY:
        lines = [running_summary] if running_summary else []
        return {"header": WM_HEADER, "lines": lines}
    return {"header": "", "lines": []}


def _assemble_context(goal_line: str, sections: list[tuple[str, list[str]]], budget: int) -> str:
    def render(parts: list[tuple[str, list[str]]]) -> str:
        chunks = [goal_line]
        for header, lines in parts:
            if lines:
                chunks.append(header + "\n" + "\n".join(lines))
        return "\n\n".join(chunks)

    live = [(h, list(lines)) for h, lines in sections]
    text = render(live)
    if len(text) <= budget:
        return text
    # drop oldest lines first, section by section in given order; the goal
    # line is never dropped
    for _header, lines in live:
        truncated = False
        while lines and len(render(live)) > budget:
            lines.pop(0)
            if lines and not truncated:
                lines.insert(0, SECTION_TRUNCATION_MARKER)
                truncated = True
            elif truncated and lines == [SECTION_TRUNCATION_MARKER]:
                lines.pop(0)
        if len(render(live)) <= budget:
            return render(live)
    return render(live)[:budget]


def _episodic_images(em_context: EpisodicContext, allowance: int) -> list[RoiImage]:
    images: list[RoiImage] = []
    for entry in em_context.selected:
        for roi in entry.rois:
            if len(images) >= allowance:
                return images
            images.append(roi)
    return images


def construct_input(
    goal: TaskGoal,
    screenshot: Screenshot,
    wm: WorkingMemory,
    em_context: EpisodicContext,
    config: EngineConfig,
    history: Sequence[StepRecord] = (),
    running_summary: str = "",
    past_frames: Sequence[RoiImage] = (),
) -> MemoryInput:
    """Build the backbone input for the configured strategy.

    The context always opens with the goal section; memory images never
    exceed K_roi working-memory crops plus the episodic allowance (the cap
    also binds replayed past screenshots).
    """
    goal_line = TASK_HEADER + goal.text
    mode = config.strategy
    image_budget = config.wm.k_roi + config.episodic_roi_allowance
    sections: list[tuple[str, list[str]]] = []
    memory_images: list[RoiImage] = []

    if mode in (StrategyMode.WM_ONLY, StrategyMode.WM_PLUS_EM):
        wm_text = render_text(wm)
        sections.append((WM_HEADER, wm_text.split("\n") if wm_text else []))
        memory_images.extend(select_roi_refs(wm, config.wm.k_roi))
        if mode is StrategyMode.WM_PLUS_EM:
            em_text = em_context.rendered_text
            sections.append((EM_HEADER, em_text.split("\n") if em_text else []))
            memory_images.extend(
                _episodic_images(em_context, config.episodic_roi_allowance)
            )
    elif mode in (StrategyMode.REPLAY_ALL, StrategyMode.TEXT_SUMMARY):
        piece = baseline_strategy(mode, history, running_summary)
        sections.append((piece["header"], piece["lines"]))
        if mode is StrategyMode.REPLAY_ALL and config.include_past_screenshots:
            memory_images.extend(past_frames[-image_budget:])
    context_text = _assemble_context(goal_line, sections, config.context_char_budget)
    images = tuple(memory_images[:image_budget])
    return MemoryInput(
        screenshot=screenshot,
        memory_images=images,
        context_text=context_text,
        accounting={"image_count": len(images) + 1, "char_count": len(context_text)},
    )


def serialize_messages(minput: MemoryInput) -> list[dict]:
    """System instructions plus a single user turn: context text, memory
    images in order, current screenshot last."""
    parts = [prompts.text_part(minput.context_text)]
    parts.extend(prompts.image_part(r.pixels, ref=r.identifier) for r in minput.memory_images)
    parts.append(
        prompts.image_part(
            minput.screenshot.pixels, ref=pixel_identifier(minput.screenshot.pixels)
        )
    )
    return [
        {"role": "system", "content": [prompts.text_part(prompts.BACKBONE_SYSTEM_PROMPT)]},
        {"role": "user", "content": parts},
    ]


def snapshot_messages(messages: list[dict]) -> list[dict]:
    """JSON-safe snapshot of a message sequence: images become refs."""
    out = []
    for msg in messages:
        parts = []
        for part in msg.get("content", []):
            if part.get("type") == "text":
                parts.append({"type": "text", "text": part["text"]})
            else:
                parts.append({"type": "image", "ref": part.get("ref")})
        out.append({"role": msg["role"], "content": parts})
    return out


def _memory_snapshot(state: EpisodeState) -> dict | None:
    mode = state.strategy
    if mode is StrategyMode.NO_HISTORY:
        return None
    if mode is StrategyMode.REPLAY_ALL:
        lines = [f"step {r.step}: {r.action.raw}" for r in state.history if r.action]
        return {"kind": "history", "lines": lines}
    if mode is StrategyMode.TEXT_SUMMARY:
        return {"kind": "summary", "summary": state.running_summary}
    doc = snapshot(state.wm)
    return {
        "kind": "memory",
        "working_memory": doc,
        "episodic_refreshed_at": state.em_context.refreshed_at_step,
        "episodic_selected": [e.entry_id for e in state.em_context.selected],
    }


def _step_digest(state: EpisodeState, record: StepRecord, minput: MemoryInput) -> str:
    payload = {
        "step": record.step,
        "step_output": record.step_output.to_dict() if record.step_output else None,
        "action": record.action.raw if record.action else None,
        "input_digest": record.input_digest,
        "context_chars": minput.accounting["char_count"],
        "image_count": minput.accounting["image_count"],
        "memory": _memory_snapshot(state),
    }
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode("utf-8")).hexdigest()


def _commit_step(
    state: EpisodeState,
    config: EngineConfig,
    t: int,
    screenshot: Screenshot,
    step_out: StepOutput | None,
    wm_hat: WorkingMemory,
    em_context: EpisodicContext,
    running_summary: str,
    minput: MemoryInput | None,
    messages: list[dict] | None,
    action: Action | None,
    metas: list[CallMeta],
) -> None:
    state.wm = wm_hat
    state.em_context = em_context
    state.running_summary = running_summary
    state.t = t
    state.last_screenshot = screenshot
    record = StepRecord(
        step=t,
        screenshot_ref=pixel_identifier(screenshot.pixels),
        step_output=step_out,
        input_digest=minput.digest() if minput else "",
        action=action,
        tokens_in=sum(m.tokens_in for m in metas),
        tokens_out=sum(m.tokens_out for m in metas),
    )
    state.history.append(record)
    state.tokens_in += record.tokens_in
    state.tokens_out += record.tokens_out
    if config.strategy is StrategyMode.REPLAY_ALL and config.include_past_screenshots:
        from .core import BBox, crop_roi

        state.past_frames.append(crop_roi(screenshot, BBox.full_frame()))
        budget = config.wm.k_roi + config.episodic_roi_allowance
        del state.past_frames[:-budget]
    state.memory_snapshots.append(_memory_snapshot(state))
    state.input_snapshots.append(snapshot_messages(messages) if messages else [])
    if minput is not None:
        state.step_digests.append(_step_digest(state, record, minput))


def run_step(
    state: EpisodeState, screenshot: Screenshot, rig: BackendRig, config: EngineConfig, bank: EpisodicBank
) -> Action:
    """Advance one step; state mutates only at the final commit. A transport
    failure still commits the partial step (no action) so the aborted
    episode's memory and history survive for audit, then propagates."""
    if state.status is not EpisodeStatus.RUNNING:
        raise RuntimeError(f"episode is {state.status.value}, not running")
    t = state.t + 1
    mode = config.strategy
    metas: list[CallMeta] = []

    step_out: StepOutput | None = None
    wm_hat = state.wm
    em_context = state.em_context
    running_summary = state.running_summary
    minput: MemoryInput | None = None
    messages: list[dict] | None = None

    try:
        uses_step_op = mode in (
            StrategyMode.TEXT_SUMMARY, StrategyMode.WM_ONLY, StrategyMode.WM_PLUS_EM
        )
        if uses_step_op:
            # render_text budgets itself; the running summary needs the cap applied
            wm_text = (
                running_summary[: config.wm.render_budget]
                if mode is StrategyMode.TEXT_SUMMARY
                else render_text(state.wm)
            )
            req = StepRequest(
                goal=state.goal, screenshot=screenshot,
                prev_action=state.prev_action(), wm_text=wm_text,
            )
            step_out, meta = invoke_step(rig.backend(ROLE_STEP), req, rig.config(ROLE_STEP))
            metas.append(meta)
            if mode is StrategyMode.TEXT_SUMMARY:
                if step_out.summary.strip():
                    running_summary = step_out.summary
            else:
                wm_hat = apply_step(state.wm, step_out, screenshot, rig.embedder)
                wm_hat, cmeta = maybe_compress(
                    wm_hat, rig.backend(ROLE_COMPRESS), state.goal, rig.config(ROLE_COMPRESS)
                )
                if cmeta is not None:
                    metas.append(cmeta)
                if mode is StrategyMode.WM_PLUS_EM:
                    em_context, smeta = episodic_refresh(
                        t,
                        step_out.retrieve,
                        state.em_context,
                        bank,
                        screenshot,
                        state.goal,
                        rig.backend(ROLE_SELECT),
                        rig.embedder,
                        config.episodic,
                        rig.config(ROLE_SELECT),
                    )
                    if smeta is not None:
                        metas.append(smeta)

        minput = construct_input(
            state.goal, screenshot, wm_hat, em_context, config,
            history=state.history, running_summary=running_summary,
            past_frames=state.past_frames,
        )
        messages = serialize_messages(minput)
        action, ameta = predict_action(
            rig.backend(ROLE_BACKBONE), str(screenshot.step_index), messages,
            rig.config(ROLE_BACKBONE),
        )
        metas.append(ameta)
    except TransportFailure:
        _commit_step(
            state, config, t, screenshot, step_out, wm_hat, em_context,
            running_summary, minput, messages, None, metas,
        )
        raise

    _commit_step(
        state, config, t, screenshot, step_out, wm_hat, em_context,
        running_summary, minput, messages, action, metas,
    )
    return action


class FrameSource(Protocol):
    """Yields screenshots until the episode ends; ``verdict`` may report the
    recorded outcome once frames are exhausted."""

    def __iter__(self) -> Iterator[Screenshot]: ...

    @property
    def verdict(self) -> str | None: ...


class ReplayFrameSource:
    """Offline replay over recorded screenshots (the benchmark path)."""

    def __init__(self, screenshots: Sequence[Screenshot], verdict: str | None = None):
        self._screenshots = list(screenshots)
        self._verdict = verdict

    def __iter__(self) -> Iterator[Screenshot]:
        return iter(self._screenshots)

    @property
    def verdict(self) -> str | None:
        return self._verdict


def run_episode(
    goal: TaskGoal,
    frame_source,
    rig: BackendRig,
    bank: EpisodicBank,
    config: EngineConfig,
    clock: Clock | None = None,
    episode_index: int = 0,
    created_at: float | None = None,
) -> tuple[EpisodeState, EpisodicEntry | None]:
    """Run one episode to termination.

    The bank snapshot given here stays fixed for the whole episode. On
    normal termination under wm_plus_em with write-back enabled, the
    episodic writer produces an entry for the caller to commit; aborted
    episodes are never written back.
    """
    clock = clock or RealClock()
    state = EpisodeState(
        goal=goal,
        strategy=config.strategy,
        episode_id=goal.episode_id or f"episode-{episode_index:04d}",
        wm=WorkingMemory(config=config.wm),
    )
    started = clock.now()
    for screenshot in frame_source:
        if state.t >= config.max_steps:
            state.status = EpisodeStatus.FAILURE
            break
        try:
            action = run_step(state, screenshot, rig, config, bank)
        except TransportFailure as exc:
            state.status = EpisodeStatus.ABORTED
            state.abort_reason = str(exc)
            log.warning("episode %s aborted at step %d: %s", state.episode_id, state.t, exc)
            break
        if action.kind is ActionKind.COMPLETE:
            state.status = EpisodeStatus.SUCCESS
            break
    if state.status is EpisodeStatus.RUNNING:
        verdict = getattr(frame_source, "verdict", None)
        state.status = (
            EpisodeStatus.SUCCESS if verdict == "success" else EpisodeStatus.FAILURE
        )
    state.wall_time = clock.now() - started

    entry: EpisodicEntry | None = None
    if (
        config.strategy is StrategyMode.WM_PLUS_EM
        and config.write_back
        and state.status in (EpisodeStatus.SUCCESS, EpisodeStatus.FAILURE)
    ):
        entry, meta = write_episode(
            goal=goal,
            outcome=state.status.value,
            final_wm=state.wm,
            write_backend=rig.backend(ROLE_WRITE),
            embedder=rig.embedder,
            config=config.episodic,
            backend_config=rig.config(ROLE_WRITE),
            final_screenshot=state.last_screenshot,
            created_at=created_at,
            source_episode=state.episode_id,
        )
        state.tokens_in += meta.tokens_in
        state.tokens_out += meta.tokens_out
        state.written_entry_id = entry.entry_id
    return state, entry


def episode_record(state: EpisodeState) -> dict:
    """JSON-safe episode record (per-step digests plus accounting)."""
    return {
        "version": EPISODE_RECORD_VERSION,
        "episode_id": state.episode_id,
        "goal": state.goal.text,
        "strategy": state.strategy.value,
        "status": state.status.value,
        "abort_reason": state.abort_reason,
        "steps": [
            {
                "step": r.step,
                "screenshot_ref": r.screenshot_ref,
                "step_output": r.step_output.to_dict() if r.step_output else None,
                "action": r.action.raw if r.action else None,
                "action_kind": r.action.kind.value if r.action else None,
                "input_digest": r.input_digest,
                "tokens_in": r.tokens_in,
                "tokens_out": r.tokens_out,
            }
            for r in state.history
        ],
        "memory_snapshots": state.memory_snapshots,
        "step_digests": state.step_digests,
        "tokens_in": state.tokens_in,
        "tokens_out": state.tokens_out,
        "wall_time": state.wall_time,
        "written_entry_id": state.written_entry_id,
    }


def save_episode_record(state: EpisodeState, out_dir: str | Path) -> Path:
    root = Path(out_dir)
    inputs = root / "inputs"
    inputs.mkdir(parents=True, exist_ok=True)
    (root / "episode.json").write_text(
        json.dumps(episode_record(state), sort_keys=True, indent=2), encoding="utf-8"
    )
    for i, snap in enumerate(state.input_snapshots, start=1):
        (inputs / f"step_{i:04d}.json").write_text(
            json.dumps(snap, sort_keys=True, indent=2), encoding="utf-8"
        )
    return root
