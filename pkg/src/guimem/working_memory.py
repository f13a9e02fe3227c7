"""Event-gated in-episode working memory.

A WorkingMemory value is immutable: gated appends and compression return new
values, so the pre-step and post-step states coexist (the step operator for
step t always sees the state committed at t-1). Three laws hold across any
operation sequence and are enforced by tests:

  gate law        blocks' covered entries + len(recent) == number of writes
                  whose salience strictly exceeded tau
  monotone steps  step indices strictly increase across blocks then recent
  append purity   a gated-out apply_step returns its input unchanged
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

from .backends.embedder import Embedder
from .backends.invoke import CallMeta, invoke_compress
from .backends.schemas import BackendConfig, CompressEntry, CompressRequest, StepOutput
from .core import BBox, DegenerateBox, Embedding, RoiImage, Screenshot, TaskGoal, crop_roi

log = logging.getLogger(__name__)

SNAPSHOT_VERSION = 1

TRUNCATION_MARKER = "[earlier memory truncated]"


@dataclass(frozen=True)
class WMConfig:
    tau: float = 0.5  # strict gate: write iff salience > tau
    n_recent: int = 8
    k_roi: int = 4
    max_roi_per_block: int = 2
    render_budget: int = 2000
    clamp_degenerate: bool = False


@dataclass(frozen=True)
class WorkingMemoryEntry:
    step: int
    summary: str
    salience: float
    bbox: BBox | None = None
    roi: RoiImage | None = None
    embedding: Embedding | None = None


@dataclass(frozen=True)
class CompressedBlock:
    first_step: int
    last_step: int
    summary: str
    retained_rois: tuple[str, ...]
    covered_count: int


@dataclass(frozen=True)
class WorkingMemory:
    config: WMConfig = field(default_factory=WMConfig)
    blocks: tuple[CompressedBlock, ...] = ()
    recent: tuple[WorkingMemoryEntry, ...] = ()
    roi_store: dict = field(default_factory=dict)  # identifier -> RoiImage; treated as immutable

    def last_step(self) -> int:
        if self.recent:
            return self.recent[-1].step
        if self.blocks:
            return self.blocks[-1].last_step
        return 0

    def coverage(self) -> int:
        """Total gated writes this memory accounts for."""
        return sum(b.covered_count for b in self.blocks) + len(self.recent)


def apply_step(
    wm: WorkingMemory, out: StepOutput, screenshot: Screenshot, embedder: Embedder
) -> WorkingMemory:
    """Gated append: write an entry iff out.salience strictly exceeds tau.

    When the gate stays closed the input value is returned unchanged. A
    degenerate ROI box drops the visual fields (entry stays textual) and
    logs a warning.
    """
    if screenshot.step_index <= wm.last_step():
        raise ValueError(
            f"step {screenshot.step_index} not after last stored step {wm.last_step()}"
        )
    if out.salience <= wm.config.tau:
        return wm

    bbox = out.roi
    roi = None
    embedding = None
    if bbox is not None:
        try:
            roi = crop_roi(screenshot, bbox, clamp_min_size=wm.config.clamp_degenerate)
            embedding = embedder.embed_image(roi.pixels)
        except DegenerateBox as exc:
            log.warning("step %d roi dropped: %s", screenshot.step_index, exc)
            bbox = None
            roi = None
    entry = WorkingMemoryEntry(
        step=screenshot.step_index,
        summary=out.summary,
        salience=out.salience,
        bbox=bbox,
        roi=roi,
        embedding=embedding,
    )
    roi_store = wm.roi_store
    if roi is not None:
        roi_store = {**wm.roi_store, roi.identifier: roi}
    return replace(wm, recent=wm.recent + (entry,), roi_store=roi_store)


def maybe_compress(
    wm: WorkingMemory, backend, goal: TaskGoal, backend_config: BackendConfig
) -> tuple[WorkingMemory, CallMeta | None]:
    """When the recent list exceeds capacity, consolidate the oldest
    ceil(n/2) entries into one compressed block.

    Coverage accounting is preserved no matter what the compressor replies:
    the block's covered_count comes from the entries themselves, and the
    parse fallback keeps the most recent identifier.
    """
    n = len(wm.recent)
    if n <= wm.config.n_recent:
        return wm, None
    cut = math.ceil(n / 2)
    old, rest = wm.recent[:cut], wm.recent[cut:]
    req = CompressRequest(
        goal=goal,
        entries=tuple(
            CompressEntry(
                step=e.step,
                summary=e.summary,
                roi_ids=(e.roi.identifier,) if e.roi else (),
            )
            for e in old
        ),
    )
    out, meta = invoke_compress(backend, req, backend_config, wm.config.max_roi_per_block)
    block = CompressedBlock(
        first_step=old[0].step,
        last_step=old[-1].step,
        summary=out.summary,
        retained_rois=out.retained_rois,
        covered_count=len(old),
    )
    keep_ids = {rid for b in wm.blocks for rid in b.retained_rois}
    keep_ids.update(block.retained_rois)
    keep_ids.update(e.roi.identifier for e in rest if e.roi)
    roi_store = {rid: img for rid, img in wm.roi_store.items() if rid in keep_ids}
    return replace(wm, blocks=wm.blocks + (block,), recent=rest, roi_store=roi_store), meta


def select_roi_refs(wm: WorkingMemory, k_roi: int | None = None) -> tuple[RoiImage, ...]:
    """At most k ROI images: recent entries newest-first, then block-retained
    identifiers newest-block-first (newest crop first within a block)."""
    k = wm.config.k_roi if k_roi is None else k_roi
    if k <= 0:
        return ()
    picked: list[RoiImage] = []
    for entry in reversed(wm.recent):
        if entry.roi is not None:
            picked.append(entry.roi)
            if len(picked) >= k:
                return tuple(picked)
    for block in reversed(wm.blocks):
        rois = [wm.roi_store[rid] for rid in block.retained_rois if rid in wm.roi_store]
        rois.sort(key=lambda r: -r.source_step)
        for roi in rois:
            picked.append(roi)
            if len(picked) >= k:
                return tuple(picked)
    return tuple(picked)


def _entry_line(entry: WorkingMemoryEntry) -> str:
    line = f"[step {entry.step}] {entry.summary}"
    if entry.roi is not None:
        line += f" (ROI: {entry.roi.identifier[:12]})"
    return line


def render_text(wm: WorkingMemory) -> str:
    """Deterministic chronological rendering, budgeted with oldest-first
    truncation."""
    lines = [f"[steps {b.first_step}-{b.last_step}] {b.summary}" for b in wm.blocks]
    lines.extend(_entry_line(e) for e in wm.recent)
    if not lines:
        return ""
    text = "\n".join(lines)
    budget = wm.config.render_budget
    if len(text) <= budget:
        return text
    while len(lines) > 1:
        lines.pop(0)
        text = "\n".join([TRUNCATION_MARKER] + lines)
        if len(text) <= budget:
            return text
    return ("\n".join([TRUNCATION_MARKER] + lines))[:budget]


def snapshot(wm: WorkingMemory) -> dict:
    """Versioned JSON-safe document for replay/audit (one-way: pixel data is
    referenced by ROI identifier, not embedded)."""
    return {
        "version": SNAPSHOT_VERSION,
        "config": {
            "tau": wm.config.tau,
            "n_recent": wm.config.n_recent,
            "k_roi": wm.config.k_roi,
            "max_roi_per_block": wm.config.max_roi_per_block,
        },
        "blocks": [
            {
                "first_step": b.first_step,
                "last_step": b.last_step,
                "summary": b.summary,
                "retained_rois": list(b.retained_rois),
                "covered_count": b.covered_count,
            }
            for b in wm.blocks
        ],
        "recent": [
            {
                "step": e.step,
                "summary": e.summary,
                "salience": e.salience,
                "bbox": e.bbox.as_list() if e.bbox else None,
                "roi_id": e.roi.identifier if e.roi else None,
            }
            for e in wm.recent
        ],
        "roi_ids": sorted(wm.roi_store),
    }
