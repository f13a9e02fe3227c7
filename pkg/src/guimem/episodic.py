"""Cross-episode episodic memory: dual-embedding coarse retrieval, learned
selection, refresh gating, terminal writing, and durable persistence.

Retrieval is exact brute force (banks here are desk-scale, <= 10^3 entries),
which keeps the ranking testable against an exhaustive oracle bit-for-bit.
A bank value is an immutable snapshot; appends produce a new snapshot, and
an episode holds one snapshot for its whole run.

On-disk layout of a bank directory:
    manifest.jsonl   one header line + one record per entry, each line
                     carrying a sha256 checksum of itself
    embeddings.bin   little-endian float32, stride = dim, element offsets
                     recorded per record
    rois/<id>.png    ROI crops, content-addressed by pixel hash
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .backends.embedder import Embedder
from .backends.invoke import CallMeta, invoke_select, invoke_write
from .backends.schemas import (
    BackendConfig,
    CompressEntry,
    DimensionMismatch,
    SelectCandidate,
    SelectRequest,
    WriteRequest,
)
from .core import BBox, Embedding, RoiImage, Screenshot, TaskGoal, pixel_identifier, read_png, write_png
from .working_memory import WorkingMemory, select_roi_refs

log = logging.getLogger(__name__)

MANIFEST_VERSION = 1

OUTCOMES = ("success", "failure", "unknown")


class DuplicateId(ValueError):
    pass


class CorruptManifest(ValueError):
    pass


@dataclass(frozen=True)
class EpisodicEntry:
    entry_id: str
    goal_text: str
    summary: str
    outcome: str
    key_actions: tuple[str, ...]
    rois: tuple[RoiImage, ...]
    vis_embedding: Embedding
    goal_embedding: Embedding
    created_at: float
    source_episode: str = ""

    def __post_init__(self):
        if not self.summary:
            raise ValueError("entry summary must be non-empty")
        if self.outcome not in OUTCOMES:
            raise ValueError(f"unknown outcome {self.outcome!r}")
        if self.vis_embedding.dim != self.goal_embedding.dim:
            raise DimensionMismatch(
                f"entry embeddings disagree: {self.vis_embedding.dim} vs {self.goal_embedding.dim}"
            )


@dataclass(frozen=True)
class EpisodicBank:
    dim: int
    entries: dict = field(default_factory=dict)  # id -> EpisodicEntry, insertion-ordered
    manifest_version: int = MANIFEST_VERSION

    def __len__(self) -> int:
        return len(self.entries)


@dataclass(frozen=True)
class EpisodicContext:
    selected: tuple[EpisodicEntry, ...] = ()
    rendered_text: str = ""
    refreshed_at_step: int = 0


@dataclass(frozen=True)
class RetrievalParams:
    lambda_v: float = 0.5
    lambda_g: float = 0.5
    top_k: int = 5

    def __post_init__(self):
        if self.lambda_v < 0 or self.lambda_g < 0:
            raise ValueError("similarity weights must be non-negative")
        if self.lambda_v + self.lambda_g <= 0:
            raise ValueError("at least one similarity weight must be positive")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")


@dataclass(frozen=True)
class EpisodicConfig:
    params: RetrievalParams = field(default_factory=RetrievalParams)
    max_selected: int = 2
    render_budget: int = 1200
    visual_key: str = "final_screenshot"  # or "roi_mean"
    max_write_rois: int = 3


def bank_new(dim: int) -> EpisodicBank:
    return EpisodicBank(dim=dim)


def bank_append(bank: EpisodicBank, entry: EpisodicEntry) -> EpisodicBank:
    """Single-writer commit: returns a new snapshot; never mutates."""
    if entry.entry_id in bank.entries:
        raise DuplicateId(entry.entry_id)
    if entry.vis_embedding.dim != bank.dim:
        raise DimensionMismatch(
            f"entry dim {entry.vis_embedding.dim} != bank dim {bank.dim}"
        )
    return replace(bank, entries={**bank.entries, entry.entry_id: entry})


def _safe_unit(values: np.ndarray) -> np.ndarray:
    norm = float(np.linalg.norm(values))
    return values / norm if norm > 0 else values


def coarse_retrieve(
    bank: EpisodicBank, q_v: Embedding, q_g: Embedding, params: RetrievalParams
) -> list[tuple[EpisodicEntry, float]]:
    """Exact top-K by lambda_v*cos(visual) + lambda_g*cos(goal).

    Ties break toward newer created_at, then lexicographic id, so replays
    are deterministic. An empty bank yields an empty list.
    """
    if q_v.dim != bank.dim or q_g.dim != bank.dim:
        raise DimensionMismatch(
            f"query dims ({q_v.dim}, {q_g.dim}) != bank dim {bank.dim}"
        )
    entries = list(bank.entries.values())
    if not entries:
        return []
    vis = np.stack([e.vis_embedding.values for e in entries]).astype(np.float64)
    goal = np.stack([e.goal_embedding.values for e in entries]).astype(np.float64)
    vis /= np.maximum(np.linalg.norm(vis, axis=1, keepdims=True), 1e-300)
    goal /= np.maximum(np.linalg.norm(goal, axis=1, keepdims=True), 1e-300)
    qv = _safe_unit(q_v.values.astype(np.float64))
    qg = _safe_unit(q_g.values.astype(np.float64))
    scores = params.lambda_v * (vis @ qv) + params.lambda_g * (goal @ qg)
    order = sorted(
        range(len(entries)),
        key=lambda i: (-scores[i], -entries[i].created_at, entries[i].entry_id),
    )
    return [(entries[i], float(scores[i])) for i in order[: params.top_k]]


def render_context_text(
    selected: tuple[EpisodicEntry, ...], budget: int = 1200
) -> str:
    """Deterministic templated rendering of the selected past episodes."""
    lines = []
    for entry in selected:
        line = f"[past episode: {entry.outcome}] {entry.summary}"
        if entry.key_actions:
            line += "; key actions: " + "; ".join(entry.key_actions)
        lines.append(line)
    kept: list[str] = []
    total = 0
    for line in lines:
        extra = len(line) + (1 if kept else 0)
        if total + extra > budget:
            kept.append("[further past episodes truncated]")
            break
        kept.append(line)
        total += extra
    return "\n".join(kept)


def refresh_context(
    t: int,
    gamma: int,
    prev: EpisodicContext,
    bank: EpisodicBank,
    screenshot: Screenshot,
    goal: TaskGoal,
    select_backend,
    embedder: Embedder,
    config: EpisodicConfig,
    backend_config: BackendConfig,
) -> tuple[EpisodicContext, CallMeta | None]:
    """Refresh rule: rebuild the context at the first step and whenever the
    step operator raises the retrieval flag; otherwise hand back the previous
    context untouched."""
    if t != 1 and gamma != 1:
        return prev, None
    try:
        q_v = embedder.embed_image(screenshot.pixels)
        q_g = embedder.embed_text(goal.text)
    except DimensionMismatch:
        raise
    except Exception as exc:  # embedder backends may fail arbitrarily
        log.warning("embedding failed at step %d: %s", t, exc)
        if t == 1:
            return EpisodicContext(refreshed_at_step=1), None
        return prev, None
    candidates = coarse_retrieve(bank, q_v, q_g, config.params)
    if not candidates:
        return EpisodicContext(refreshed_at_step=t), None
    req = SelectRequest(
        goal=goal,
        screenshot=screenshot,
        candidates=tuple(
            SelectCandidate(
                entry_id=e.entry_id,
                summary=e.summary,
                outcome=e.outcome,
                key_actions=e.key_actions,
                roi_count=len(e.rois),
            )
            for e, _score in candidates
        ),
    )
    out, meta = invoke_select(select_backend, req, backend_config, config.max_selected)
    by_id = {e.entry_id: e for e, _score in candidates}
    selected = tuple(by_id[cid] for cid in out.selected_ids[: config.max_selected])
    rendered = render_context_text(selected, config.render_budget)
    return EpisodicContext(selected=selected, rendered_text=rendered, refreshed_at_step=t), meta


def _entry_content_id(
    goal_text: str,
    outcome: str,
    summary: str,
    key_actions: tuple[str, ...],
    roi_ids: tuple[str, ...],
    source_episode: str,
) -> str:
    blob = json.dumps(
        {
            "goal": goal_text,
            "outcome": outcome,
            "summary": summary,
            "key_actions": list(key_actions),
            "roi_ids": list(roi_ids),
            "source_episode": source_episode,
        },
        sort_keys=True,
        separators=(",", ":"),
    )
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def _visual_key_embedding(
    omega: tuple[RoiImage, ...],
    final_screenshot: Screenshot | None,
    embedder: Embedder,
    mode: str,
) -> Embedding:
    def from_rois() -> Embedding | None:
        if not omega:
            return None
        vectors = [embedder.embed_image(r.pixels).values.astype(np.float64) for r in omega]
        mean = np.mean(vectors, axis=0)
        if float(np.linalg.norm(mean)) == 0.0:
            return None
        return Embedding.unit(mean)

    def from_screen() -> Embedding | None:
        if final_screenshot is None:
            return None
        return embedder.embed_image(final_screenshot.pixels)

    first, second = (from_screen, from_rois) if mode == "final_screenshot" else (from_rois, from_screen)
    for source in (first, second):
        emb = source()
        if emb is not None:
            return emb
    return embedder.embed_image(np.zeros((1, 1, 3), dtype=np.uint8))


def write_episode(
    goal: TaskGoal,
    outcome: str,
    final_wm: WorkingMemory,
    write_backend,
    embedder: Embedder,
    config: EpisodicConfig,
    backend_config: BackendConfig,
    final_screenshot: Screenshot | None = None,
    created_at: float | None = None,
    source_episode: str = "",
) -> tuple[EpisodicEntry, CallMeta]:
    """Convert a terminated episode into one reusable bank entry.

    The representative ROI set is the newest min(3, available) crops of the
    final working memory (block-retained ids eligible). The id is derived
    from content, so rewriting the same episode is idempotent.
    """
    omega = select_roi_refs(final_wm, config.max_write_rois)
    omega_ids = tuple(r.identifier for r in omega)
    entries = tuple(
        CompressEntry(
            step=b.first_step,
            summary=f"[steps {b.first_step}-{b.last_step}] {b.summary}",
            roi_ids=b.retained_rois,
        )
        for b in final_wm.blocks
    ) + tuple(
        CompressEntry(
            step=e.step, summary=e.summary, roi_ids=(e.roi.identifier,) if e.roi else ()
        )
        for e in final_wm.recent
    )
    req = WriteRequest(goal=goal, outcome=outcome, entries=entries, roi_ids=omega_ids)
    out, meta = invoke_write(write_backend, req, backend_config, config.max_write_rois)
    by_id = {r.identifier: r for r in omega}
    rois = tuple(by_id[rid] for rid in out.retained_rois)
    vis_embedding = _visual_key_embedding(omega, final_screenshot, embedder, config.visual_key)
    goal_embedding = embedder.embed_text(goal.text)
    entry = EpisodicEntry(
        entry_id=_entry_content_id(
            goal.text, out.outcome, out.summary, out.key_actions,
            tuple(r.identifier for r in rois), source_episode,
        ),
        goal_text=goal.text,
        summary=out.summary,
        outcome=out.outcome,
        key_actions=out.key_actions,
        rois=rois,
        vis_embedding=vis_embedding,
        goal_embedding=goal_embedding,
        created_at=time.time() if created_at is None else float(created_at),
        source_episode=source_episode,
    )
    return entry, meta


# --- persistence ---------------------------------------------------------


def _checksum_line(record: dict) -> str:
    core = json.dumps(record, sort_keys=True, separators=(",", ":"))
    digest = hashlib.sha256(core.encode("utf-8")).hexdigest()
    return json.dumps({**record, "checksum": digest}, sort_keys=True, separators=(",", ":"))


def _verify_line(line: str, line_no: int) -> dict:
    try:
        record = json.loads(line)
    except json.JSONDecodeError as exc:
        raise CorruptManifest(f"line {line_no}: not valid JSON ({exc})") from exc
    if not isinstance(record, dict) or "checksum" not in record:
        raise CorruptManifest(f"line {line_no}: missing checksum")
    claimed = record.pop("checksum")
    core = json.dumps(record, sort_keys=True, separators=(",", ":"))
    actual = hashlib.sha256(core.encode("utf-8")).hexdigest()
    if actual != claimed:
        raise CorruptManifest(f"line {line_no}: checksum mismatch")
    return record


def _canonical_entries(bank: EpisodicBank) -> list[EpisodicEntry]:
    return sorted(bank.entries.values(), key=lambda e: (e.created_at, e.entry_id))


def bank_save(bank: EpisodicBank, path: str | Path) -> None:
    """Write the bank directory; deterministic layout, so re-saving a loaded
    bank reproduces the manifest byte for byte."""
    root = Path(path)
    (root / "rois").mkdir(parents=True, exist_ok=True)
    entries = _canonical_entries(bank)

    vectors: list[np.ndarray] = []
    lines = [
        _checksum_line(
            {
                "kind": "header",
                "version": bank.manifest_version,
                "dim": bank.dim,
                "count": len(entries),
            }
        )
    ]
    for entry in entries:
        vis_offset = len(vectors) * bank.dim
        vectors.append(entry.vis_embedding.values.astype("<f4"))
        goal_offset = len(vectors) * bank.dim
        vectors.append(entry.goal_embedding.values.astype("<f4"))
        record = {
            "kind": "entry",
            "id": entry.entry_id,
            "goal_text": entry.goal_text,
            "summary": entry.summary,
            "outcome": entry.outcome,
            "key_actions": list(entry.key_actions),
            "rois": [
                {
                    "id": r.identifier,
                    "source_step": r.source_step,
                    "bbox": r.source_bbox.as_list(),
                }
                for r in entry.rois
            ],
            "created_at": entry.created_at,
            "source_episode": entry.source_episode,
            "vis_offset": vis_offset,
            "goal_offset": goal_offset,
        }
        lines.append(_checksum_line(record))
        for roi in entry.rois:
            roi_path = root / "rois" / f"{roi.identifier}.png"
            if not roi_path.exists():
                write_png(roi_path, roi.pixels)

    blob = np.concatenate(vectors) if vectors else np.zeros(0, dtype="<f4")
    (root / "embeddings.bin").write_bytes(blob.astype("<f4").tobytes())
    (root / "manifest.jsonl").write_text("\n".join(lines) + "\n", encoding="utf-8")


def _read_manifest_text(manifest: Path) -> str:
    try:
        return manifest.read_bytes().decode("utf-8")
    except UnicodeDecodeError as exc:
        raise CorruptManifest(f"manifest is not valid UTF-8: {exc}") from exc


def bank_load(path: str | Path) -> EpisodicBank:
    root = Path(path)
    manifest = root / "manifest.jsonl"
    if not manifest.exists():
        raise CorruptManifest(f"no manifest at {manifest}")
    lines = _read_manifest_text(manifest).splitlines()
    if not lines:
        raise CorruptManifest("line 1: empty manifest")
    header = _verify_line(lines[0], 1)
    if header.get("kind") != "header":
        raise CorruptManifest("line 1: expected header record")
    if header.get("version") != MANIFEST_VERSION:
        raise CorruptManifest(f"unsupported manifest version {header.get('version')}")
    dim = int(header["dim"])
    count = int(header["count"])
    if count != len(lines) - 1:
        raise CorruptManifest(
            f"header declares {count} entries but manifest has {len(lines) - 1} records"
        )
    raw = (root / "embeddings.bin").read_bytes() if (root / "embeddings.bin").exists() else b""
    floats = np.frombuffer(raw, dtype="<f4")
    expected = count * 2 * dim
    if floats.shape[0] != expected:
        raise CorruptManifest(
            f"embeddings.bin holds {floats.shape[0]} floats, expected {expected}"
        )

    def vector_at(offset: int, line_no: int) -> Embedding:
        if offset < 0 or offset + dim > floats.shape[0]:
            raise CorruptManifest(f"line {line_no}: embedding offset {offset} out of range")
        return Embedding(values=floats[offset : offset + dim].copy(), dim=dim, normalized=True)

    bank = bank_new(dim)
    for i, line in enumerate(lines[1:], start=2):
        record = _verify_line(line, i)
        if record.get("kind") != "entry":
            raise CorruptManifest(f"line {i}: expected entry record")
        rois = []
        for meta in record["rois"]:
            roi_path = root / "rois" / f"{meta['id']}.png"
            if not roi_path.exists():
                raise CorruptManifest(f"line {i}: missing roi file {meta['id']}.png")
            pixels = read_png(roi_path)
            if pixel_identifier(pixels) != meta["id"]:
                raise CorruptManifest(f"line {i}: roi {meta['id']} content hash mismatch")
            rois.append(
                RoiImage(
                    pixels=pixels,
                    source_step=int(meta["source_step"]),
                    source_bbox=BBox.from_list(meta["bbox"]),
                    identifier=meta["id"],
                )
            )
        entry = EpisodicEntry(
            entry_id=record["id"],
            goal_text=record["goal_text"],
            summary=record["summary"],
            outcome=record["outcome"],
            key_actions=tuple(record["key_actions"]),
            rois=tuple(rois),
            vis_embedding=vector_at(int(record["vis_offset"]), i),
            goal_embedding=vector_at(int(record["goal_offset"]), i),
            created_at=float(record["created_at"]),
            source_episode=record.get("source_episode", ""),
        )
        bank = bank_append(bank, entry)
    return bank


def bank_verify(path: str | Path) -> dict:
    """Integrity report: manifest checksums, embedding strides, ROI hashes.
    Collects every problem instead of stopping at the first."""
    root = Path(path)
    errors: list[str] = []
    count = 0
    dim = 0
    manifest = root / "manifest.jsonl"
    if not manifest.exists():
        return {"ok": False, "errors": [f"no manifest at {manifest}"], "count": 0, "dim": 0}
    try:
        lines = _read_manifest_text(manifest).splitlines()
    except CorruptManifest as exc:
        return {"ok": False, "errors": [str(exc)], "count": 0, "dim": 0}
    records: list[tuple[int, dict]] = []
    for i, line in enumerate(lines, start=1):
        try:
            records.append((i, _verify_line(line, i)))
        except CorruptManifest as exc:
            errors.append(str(exc))
    header = None
    if records and records[0][1].get("kind") == "header":
        header = records[0][1]
        dim = int(header.get("dim", 0))
        count = int(header.get("count", 0))
        if count != len(lines) - 1:
            errors.append(
                f"header declares {count} entries but manifest has {len(lines) - 1} records"
            )
    else:
        errors.append("line 1: expected header record")
    bin_path = root / "embeddings.bin"
    n_floats = len(bin_path.read_bytes()) // 4 if bin_path.exists() else 0
    if header is not None and n_floats != count * 2 * dim:
        errors.append(f"embeddings.bin holds {n_floats} floats, expected {count * 2 * dim}")
    for line_no, record in records[1:]:
        if record.get("kind") != "entry":
            errors.append(f"line {line_no}: expected entry record")
            continue
        for key in ("vis_offset", "goal_offset"):
            offset = int(record.get(key, -1))
            if offset < 0 or offset + dim > n_floats:
                errors.append(f"line {line_no}: {key} {offset} out of range")
        for meta in record.get("rois", []):
            roi_path = root / "rois" / f"{meta['id']}.png"
            if not roi_path.exists():
                errors.append(f"line {line_no}: missing roi file {meta['id']}.png")
            elif pixel_identifier(read_png(roi_path)) != meta["id"]:
                errors.append(f"line {line_no}: roi {meta['id']} content hash mismatch")
    return {"ok": not errors, "errors": errors, "count": count, "dim": dim}


def entry_save(entry: EpisodicEntry, path: str | Path) -> None:
    """Persist one entry as a small directory (entry.json + rois/), the unit
    the CLI's bank-append consumes from episode records."""
    root = Path(path)
    (root / "rois").mkdir(parents=True, exist_ok=True)
    record = {
        "id": entry.entry_id,
        "goal_text": entry.goal_text,
        "summary": entry.summary,
        "outcome": entry.outcome,
        "key_actions": list(entry.key_actions),
        "rois": [
            {"id": r.identifier, "source_step": r.source_step, "bbox": r.source_bbox.as_list()}
            for r in entry.rois
        ],
        "created_at": entry.created_at,
        "source_episode": entry.source_episode,
        "dim": entry.vis_embedding.dim,
        "vis_embedding": entry.vis_embedding.values.astype("<f4").tobytes().hex(),
        "goal_embedding": entry.goal_embedding.values.astype("<f4").tobytes().hex(),
    }
    (root / "entry.json").write_text(
        json.dumps(record, sort_keys=True, indent=2), encoding="utf-8"
    )
    for roi in entry.rois:
        write_png(root / "rois" / f"{roi.identifier}.png", roi.pixels)


def entry_load(path: str | Path) -> EpisodicEntry:
    root = Path(path)
    record = json.loads((root / "entry.json").read_text(encoding="utf-8"))
    dim = int(record["dim"])

    def emb(hex_blob: str) -> Embedding:
        values = np.frombuffer(bytes.fromhex(hex_blob), dtype="<f4").copy()
        return Embedding(values=values, dim=dim, normalized=True)

    rois = []
    for meta in record["rois"]:
        pixels = read_png(root / "rois" / f"{meta['id']}.png")
        if pixel_identifier(pixels) != meta["id"]:
            raise CorruptManifest(f"roi {meta['id']} content hash mismatch")
        rois.append(
            RoiImage(
                pixels=pixels,
                source_step=int(meta["source_step"]),
                source_bbox=BBox.from_list(meta["bbox"]),
                identifier=meta["id"],
            )
        )
    return EpisodicEntry(
        entry_id=record["id"],
        goal_text=record["goal_text"],
        summary=record["summary"],
        outcome=record["outcome"],
        key_actions=tuple(record["key_actions"]),
        rois=tuple(rois),
        vis_embedding=emb(record["vis_embedding"]),
        goal_embedding=emb(record["goal_embedding"]),
        created_at=float(record["created_at"]),
        source_episode=record.get("source_episode", ""),
    )


def bank_stats(bank: EpisodicBank) -> dict:
    histogram = {outcome: 0 for outcome in OUTCOMES}
    for entry in bank.entries.values():
        histogram[entry.outcome] += 1
    return {"count": len(bank.entries), "dim": bank.dim, "outcomes": histogram}
