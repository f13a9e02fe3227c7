"""Trajectory-to-training-data pipeline: converts annotated computer-use
trajectories into the four operator SFT datasets plus DPO preference pairs
via rule-based corruption and judge filtering.

Input is a trajectory bundle directory:
    frames/                  PNG per frame (optional; named frame_<idx>.png)
    frame_annotations.jsonl  one record per adjacent-frame transition
    subgoals.json            chronological semantic segments
    meta.json                episode_id, goal, task_id, outcome

Salience targets are derived, not annotated: state-changing input types
(click, drag, type, key) get 0.9, scroll transitions 0.3, no-event frames
0.0. The retrieval tag fires at the first frame of each subgoal after the
first. The corruption rule set R1-R6 is this artifact's concrete
instantiation of rule-based negative construction; every rule changes
exactly the fields it names.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import random
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .backends.embedder import HashEmbedder
from .backends.invoke import invoke_judge
from .backends.schemas import (
    BackendConfig,
    JudgeRequest,
    ParseFailure,
    StepOutput,
    WriteRequest,
    parse_compress_output,
    parse_select_output,
    parse_step_output,
    parse_write_output,
)
from .backends.scripted import ScriptedBackend
from .core import BBox, Screenshot, TaskGoal, read_png, validate_bbox, write_png
from .episodic import EpisodicBank, EpisodicEntry, RetrievalParams, bank_append, bank_new, coarse_retrieve
from .working_memory import WMConfig, WorkingMemory, apply_step, maybe_compress, select_roi_refs

log = logging.getLogger(__name__)

INPUT_TYPES = ("click", "drag", "type", "key", "scroll", "none")
STATE_CHANGING_TYPES = ("click", "drag", "type", "key")

SALIENCE_STATE_CHANGE = 0.9
SALIENCE_ROUTINE = 0.3
SALIENCE_NONE = 0.0

GENERIC_SUMMARY = "something changed on the screen"
UNFULFILLED_CLAIMS = (
    "Also completed: verified the payment details.",
    "Also completed: confirmed the account settings.",
    "Also completed: finished the final review step.",
    "Also completed: saved the exported document.",
)

STEP_RULES = ("R1", "R2", "R3", "R4")
CMP_RULES = ("R5", "R6")

DATASET_FILES = {
    "step": "d_step.jsonl",
    "cmp": "d_cmp.jsonl",
    "write": "d_write.jsonl",
    "sel": "d_sel.jsonl",
}
DPO_FILES = {"step": "dpo_step.jsonl", "cmp": "dpo_cmp.jsonl"}


class InapplicableRule(ValueError):
    pass


class BundleError(ValueError):
    pass


@dataclass(frozen=True)
class FrameAnnotation:
    frame_index: int
    action_occurred: bool
    event_description: str
    input_type: str
    key_sequence: str | None = None
    roi_box: BBox | None = None

    def __post_init__(self):
        if self.input_type not in INPUT_TYPES:
            raise BundleError(f"unknown input_type {self.input_type!r}")
        if self.key_sequence is not None and self.input_type not in ("type", "key"):
            raise BundleError("key_sequence only valid for type/key inputs")


@dataclass(frozen=True)
class SubgoalAnnotation:
    ordinal: int
    description: str
    frame_range: tuple[int, int]


@dataclass(frozen=True)
class TrajectoryBundle:
    episode_id: str
    goal: str
    task_id: str
    outcome: str
    annotations: tuple[FrameAnnotation, ...]
    subgoals: tuple[SubgoalAnnotation, ...]
    frames_dir: Path | None = None

    def frame_path(self, index: int) -> Path | None:
        if self.frames_dir is None:
            return None
        path = self.frames_dir / f"frame_{index:04d}.png"
        return path if path.exists() else None


@dataclass(frozen=True)
class OperatorSample:
    operator: str  # step | cmp | write | sel
    sample_id: str
    input_context: dict  # {"text": str, "images": [relpath, ...]}
    target: dict
    provenance: dict

    def to_dict(self) -> dict:
        return {
            "operator": self.operator,
            "sample_id": self.sample_id,
            "input_context": self.input_context,
            "target": self.target,
            "provenance": self.provenance,
        }


@dataclass(frozen=True)
class PreferencePair:
    operator: str  # step | cmp
    pair_id: str
    input_context: dict
    chosen: dict
    rejected: dict
    corruption_rule: str
    judge_margin: float | None = None

    def __post_init__(self):
        if self.chosen == self.rejected:
            raise ValueError("chosen and rejected must differ")
        if self.corruption_rule not in STEP_RULES + CMP_RULES:
            raise ValueError(f"unknown corruption rule {self.corruption_rule!r}")

    def to_dict(self) -> dict:
        return {
            "operator": self.operator,
            "pair_id": self.pair_id,
            "input_context": self.input_context,
            "chosen": self.chosen,
            "rejected": self.rejected,
            "corruption_rule": self.corruption_rule,
            "judge_margin": self.judge_margin,
        }


@dataclass(frozen=True)
class CurationConfig:
    wm: WMConfig = field(default_factory=WMConfig)
    retrieval: RetrievalParams = field(default_factory=RetrievalParams)
    embed_dim: int = 64
    max_write_rois: int = 3
    judge_rubric: str = "preference_v1"


@dataclass
class QualityReport:
    trajectories: int = 0
    samples: dict = field(default_factory=lambda: {"step": 0, "cmp": 0, "write": 0, "sel": 0})
    missing_roi: int = 0
    stock_summaries: int = 0
    rejected_write: list = field(default_factory=list)
    pairs_built: int = 0
    pairs_kept: int = 0
    judge_failures: int = 0
    judge_ties: int = 0

    def survival_rate(self) -> float:
        return self.pairs_kept / self.pairs_built if self.pairs_built else 0.0

    def to_dict(self) -> dict:
        return {
            "trajectories": self.trajectories,
            "samples": dict(self.samples),
            "missing_roi": self.missing_roi,
            "stock_summaries": self.stock_summaries,
            "rejected_write": list(self.rejected_write),
            "pairs_built": self.pairs_built,
            "pairs_kept": self.pairs_kept,
            "judge_failures": self.judge_failures,
            "judge_ties": self.judge_ties,
            "survival_rate": self.survival_rate(),
        }


# --- bundle loading ---------------------------------------------------------


def load_bundle(path: str | Path) -> TrajectoryBundle:
    root = Path(path)
    meta = json.loads((root / "meta.json").read_text(encoding="utf-8"))
    annotations = []
    for i, line in enumerate(
        (root / "frame_annotations.jsonl").read_text(encoding="utf-8").splitlines(), start=1
    ):
        if not line.strip():
            continue
        rec = json.loads(line)
        roi = rec.get("roi_box")
        box = None
        if roi is not None:
            box = BBox.from_list(roi)
            if validate_bbox(box):
                raise BundleError(f"{root.name} annotation line {i}: invalid roi_box {roi}")
        annotations.append(
            FrameAnnotation(
                frame_index=int(rec["frame_index"]),
                action_occurred=bool(rec["action_occurred"]),
                event_description=rec.get("event_description", ""),
                input_type=rec.get("input_type", "none"),
                key_sequence=rec.get("key_sequence"),
                roi_box=box,
            )
        )
    annotations.sort(key=lambda a: a.frame_index)
    if len({a.frame_index for a in annotations}) != len(annotations):
        raise BundleError(f"{root.name}: duplicate frame_index in annotations")

    subgoals = []
    for rec in json.loads((root / "subgoals.json").read_text(encoding="utf-8")):
        subgoals.append(
            SubgoalAnnotation(
                ordinal=int(rec["ordinal"]),
                description=rec["description"],
                frame_range=(int(rec["frame_range"][0]), int(rec["frame_range"][1])),
            )
        )
    subgoals.sort(key=lambda s: s.ordinal)
    prev_end = 0
    for sg in subgoals:
        first, last = sg.frame_range
        if first > last:
            raise BundleError(f"{root.name}: subgoal {sg.ordinal} has reversed frame_range")
        if first <= prev_end:
            raise BundleError(f"{root.name}: subgoal {sg.ordinal} overlaps its predecessor")
        prev_end = last

    frames_dir = root / "frames"
    return TrajectoryBundle(
        episode_id=meta["episode_id"],
        goal=meta["goal"],
        task_id=meta.get("task_id", meta["episode_id"]),
        outcome=meta.get("outcome", "unknown"),
        annotations=tuple(annotations),
        subgoals=tuple(subgoals),
        frames_dir=frames_dir if frames_dir.is_dir() else None,
    )


def load_corpus(path: str | Path) -> list[TrajectoryBundle]:
    root = Path(path)
    bundles = [
        load_bundle(child)
        for child in sorted(root.iterdir())
        if child.is_dir() and (child / "meta.json").exists()
    ]
    if not bundles:
        raise BundleError(f"no trajectory bundles under {root}")
    return bundles


# --- target derivation --------------------------------------------------------


def derive_salience(ann: FrameAnnotation) -> float:
    if not ann.action_occurred:
        return SALIENCE_NONE
    if ann.input_type in STATE_CHANGING_TYPES:
        return SALIENCE_STATE_CHANGE
    return SALIENCE_ROUTINE


def retrieval_tag_frames(subgoals: tuple[SubgoalAnnotation, ...]) -> set[int]:
    """First frame of each subgoal after the first."""
    return {sg.frame_range[0] for sg in subgoals[1:]}


def _active_subgoal(subgoals, frame_index) -> SubgoalAnnotation | None:
    for sg in subgoals:
        if sg.frame_range[0] <= frame_index <= sg.frame_range[1]:
            return sg
    return None


def _sample_id(*parts) -> str:
    return hashlib.sha256("|".join(str(p) for p in parts).encode("utf-8")).hexdigest()[:24]


def _frame_ref(bundle: TrajectoryBundle, index: int) -> str | None:
    path = bundle.frame_path(index)
    if path is None:
        return None
    return f"{bundle.episode_id}/frames/{path.name}"


def build_step_dataset(
    bundle: TrajectoryBundle, report: QualityReport | None = None
) -> list[OperatorSample]:
    """One sample per annotated adjacent-frame transition; only
    action-bearing frames carry positive salience."""
    report = report if report is not None else QualityReport()
    tags = retrieval_tag_frames(bundle.subgoals)
    samples = []
    prev_desc = ""
    for ann in bundle.annotations:
        salience = derive_salience(ann)
        summary = ann.event_description
        if salience > 0 and not summary.strip():
            summary = f"unlabeled {ann.input_type} event"
            report.stock_summaries += 1
        if salience == 0:
            summary = ann.event_description
        roi = ann.roi_box.as_list() if ann.roi_box else None
        if salience > 0 and roi is None:
            report.missing_roi += 1
        target = {
            "salience": salience,
            "summary": summary,
            "roi": roi,
            "retrieve": 1 if ann.frame_index in tags else 0,
        }
        subgoal = _active_subgoal(bundle.subgoals, ann.frame_index)
        text_lines = [f"TASK: {bundle.goal}"]
        if subgoal:
            text_lines.append(f"ACTIVE SUBGOAL: {subgoal.description}")
        if prev_desc:
            text_lines.append(f"PREVIOUS EVENT: {prev_desc}")
        images = [
            ref
            for ref in (
                _frame_ref(bundle, ann.frame_index - 1),
                _frame_ref(bundle, ann.frame_index),
            )
            if ref
        ]
        samples.append(
            OperatorSample(
                operator="step",
                sample_id=_sample_id(bundle.episode_id, "step", ann.frame_index),
                input_context={"text": "\n".join(text_lines), "images": images},
                target=target,
                provenance={"episode_id": bundle.episode_id, "frame_index": ann.frame_index},
            )
        )
        if ann.event_description:
            prev_desc = ann.event_description
    report.samples["step"] += len(samples)
    return samples


def _simulate_buffer(
    bundle: TrajectoryBundle,
    config: CurationConfig,
    on_trigger=None,
) -> tuple[WorkingMemory, list[int]]:
    """Replay the annotation stream through the real working-memory module.

    The compressor is scripted to the gold rule: block summary concatenates
    the covered subgoal descriptions, retained ids follow the recency rule.
    ``on_trigger(frame_index, old_entries, gold_target)`` fires at every
    capacity trigger; returns (final memory, trigger frame indices).
    """
    embedder = HashEmbedder(dim=config.embed_dim)
    backend_cfg = BackendConfig(max_retries=0)

    def gold_compressor(key, payload, n):
        entries = payload["entries"]
        first = entries[0]["step"]
        last = entries[-1]["step"]
        covered = [
            sg.description
            for sg in bundle.subgoals
            if sg.frame_range[0] <= last and sg.frame_range[1] >= first
        ]
        summary = "; ".join(covered) if covered else "; ".join(
            e["summary"] for e in entries if e["summary"]
        )
        ids = [rid for e in entries for rid in e["roi_ids"]]
        return {
            "summary": summary or "earlier steps",
            "retained_rois": ids[-config.wm.max_roi_per_block :],
        }

    backend = ScriptedBackend({("compress", "*"): gold_compressor})
    goal = TaskGoal(text=bundle.goal, episode_id=bundle.episode_id)
    wm = WorkingMemory(config=config.wm)
    triggers: list[int] = []
    for ann in bundle.annotations:
        salience = derive_salience(ann)
        if salience <= config.wm.tau:
            continue
        frame_path = bundle.frame_path(ann.frame_index)
        if frame_path is not None:
            pixels = read_png(frame_path)
        else:
            # annotation-only corpora still need a raster for the buffer
            pixels = np.zeros((4, 4, 3), dtype=np.uint8)
        shot = Screenshot(
            pixels=pixels, step_index=ann.frame_index, source_id=bundle.episode_id
        )
        summary = ann.event_description or f"unlabeled {ann.input_type} event"
        roi = ann.roi_box if (ann.roi_box and frame_path is not None) else None
        out = StepOutput(salience=salience, summary=summary, roi=roi, retrieve=0)
        wm = apply_step(wm, out, shot, embedder)
        if len(wm.recent) > config.wm.n_recent:
            cut = math.ceil(len(wm.recent) / 2)
            old = wm.recent[:cut]
            gold = gold_compressor(
                "",
                {
                    "entries": [
                        {
                            "step": e.step,
                            "summary": e.summary,
                            "roi_ids": [e.roi.identifier] if e.roi else [],
                        }
                        for e in old
                    ]
                },
                1,
            )
            if on_trigger is not None:
                on_trigger(ann.frame_index, old, gold)
            triggers.append(ann.frame_index)
        wm, _ = maybe_compress(wm, backend, goal, backend_cfg)
    return wm, triggers


def build_cmp_dataset(
    bundle: TrajectoryBundle,
    config: CurationConfig,
    report: QualityReport | None = None,
    asset_dir: Path | None = None,
) -> list[OperatorSample]:
    """Simulate the gated buffer; each capacity trigger yields one sample
    mapping the consolidated entries to the gold block."""
    report = report if report is not None else QualityReport()
    samples: list[OperatorSample] = []

    def on_trigger(frame_index, old, gold):
        entries_payload = [
            {
                "step": e.step,
                "summary": e.summary,
                "roi_ids": [e.roi.identifier] if e.roi else [],
            }
            for e in old
        ]
        images = []
        if asset_dir is not None:
            for e in old:
                if e.roi is not None:
                    images.append(_materialize_roi(e.roi, asset_dir))
        samples.append(
            OperatorSample(
                operator="cmp",
                sample_id=_sample_id(bundle.episode_id, "cmp", frame_index),
                input_context={
                    "text": json.dumps(
                        {"goal": bundle.goal, "entries": entries_payload},
                        ensure_ascii=False,
                        sort_keys=True,
                    ),
                    "images": images,
                },
                target={"summary": gold["summary"], "retained_rois": gold["retained_rois"]},
                provenance={"episode_id": bundle.episode_id, "frame_index": frame_index},
            )
        )

    _simulate_buffer(bundle, config, on_trigger=on_trigger)
    report.samples["cmp"] += len(samples)
    return samples


def build_write_dataset(
    bundle: TrajectoryBundle,
    config: CurationConfig,
    report: QualityReport | None = None,
    asset_dir: Path | None = None,
) -> OperatorSample | None:
    """One sample per trajectory: final buffer to compact reusable memory.
    Trajectories without subgoal annotations are rejected with a diagnostic."""
    report = report if report is not None else QualityReport()
    if not bundle.subgoals:
        report.rejected_write.append(f"{bundle.episode_id}: no subgoal annotations")
        return None
    final_wm, _ = _simulate_buffer(bundle, config)
    omega = select_roi_refs(final_wm, config.max_write_rois)
    omega_ids = [r.identifier for r in omega]
    images = [_materialize_roi(r, asset_dir) for r in omega] if asset_dir is not None else []
    target = {
        "summary": "; ".join(sg.description for sg in bundle.subgoals),
        "key_actions": [sg.description for sg in bundle.subgoals],
        "outcome": bundle.outcome,
        "retained_rois": omega_ids,
    }
    sample = OperatorSample(
        operator="write",
        sample_id=_sample_id(bundle.episode_id, "write"),
        input_context={
            "text": json.dumps(
                {"goal": bundle.goal, "outcome": bundle.outcome, "roi_ids": omega_ids},
                ensure_ascii=False,
                sort_keys=True,
            ),
            "images": images,
        },
        target=target,
        provenance={"episode_id": bundle.episode_id},
    )
    report.samples["write"] += 1
    return sample


def build_seed_bank(bundles: list[TrajectoryBundle], config: CurationConfig) -> EpisodicBank:
    """Held-out bank for selection supervision: one entry per trajectory,
    embedded with the deterministic embedder."""
    embedder = HashEmbedder(dim=config.embed_dim)
    bank = bank_new(config.embed_dim)
    for i, bundle in enumerate(bundles):
        if not bundle.subgoals:
            continue
        summary = "; ".join(sg.description for sg in bundle.subgoals)
        entry = EpisodicEntry(
            entry_id=_sample_id(bundle.episode_id, "bank-entry"),
            goal_text=bundle.goal,
            summary=summary,
            outcome=bundle.outcome if bundle.outcome in ("success", "failure") else "unknown",
            key_actions=tuple(sg.description for sg in bundle.subgoals),
            rois=(),
            vis_embedding=embedder.embed_text(f"trajectory:{bundle.episode_id}"),
            goal_embedding=embedder.embed_text(bundle.goal),
            created_at=float(i),
            source_episode=bundle.episode_id,
        )
        bank = bank_append(bank, entry)
    return bank


def build_sel_dataset(
    bundle: TrajectoryBundle,
    bank: EpisodicBank,
    task_by_episode: dict,
    config: CurationConfig,
    report: QualityReport | None = None,
) -> list[OperatorSample]:
    """For each retrieval-tagged prefix, retrieve candidates from the seed
    bank; the gold label keeps exactly the same-task entries."""
    report = report if report is not None else QualityReport()
    embedder = HashEmbedder(dim=config.embed_dim)
    q_g = embedder.embed_text(bundle.goal)
    samples = []
    for frame_index in sorted(retrieval_tag_frames(bundle.subgoals)):
        frame_path = bundle.frame_path(frame_index)
        if frame_path is not None:
            q_v = embedder.embed_image(read_png(frame_path))
        else:
            q_v = embedder.embed_text(f"frame:{bundle.episode_id}:{frame_index}")
        candidates = coarse_retrieve(bank, q_v, q_g, config.retrieval)
        candidate_ids = [e.entry_id for e, _ in candidates]
        gold = [
            e.entry_id
            for e, _ in candidates
            if task_by_episode.get(e.source_episode) == bundle.task_id
            and e.source_episode != bundle.episode_id
        ]
        payload = {
            "goal": bundle.goal,
            "frame_index": frame_index,
            "candidates": [
                {"id": e.entry_id, "summary": e.summary, "outcome": e.outcome}
                for e, _ in candidates
            ],
        }
        samples.append(
            OperatorSample(
                operator="sel",
                sample_id=_sample_id(bundle.episode_id, "sel", frame_index),
                input_context={
                    "text": json.dumps(payload, ensure_ascii=False, sort_keys=True),
                    "images": [ref for ref in (_frame_ref(bundle, frame_index),) if ref],
                },
                target={"selected": gold},
                provenance={
                    "episode_id": bundle.episode_id,
                    "frame_index": frame_index,
                    "candidate_ids": candidate_ids,
                },
            )
        )
    report.samples["sel"] += len(samples)
    return samples


def _materialize_roi(roi, asset_dir: Path) -> str:
    rel = f"assets/rois/{roi.identifier}.png"
    path = asset_dir / "rois" / f"{roi.identifier}.png"
    if not path.exists():
        path.parent.mkdir(parents=True, exist_ok=True)
        write_png(path, roi.pixels)
    return rel


# --- corruption ---------------------------------------------------------------


def _rule_rng(sample: OperatorSample, rule: str, seed: int) -> random.Random:
    return random.Random(f"{seed}|{rule}|{sample.sample_id}")


def _corrupt_roi(box: BBox, rng: random.Random) -> list[float]:
    """Move every edge by at least 30% of the box span (translate by 40%,
    flipping direction at the borders); when the box cannot be translated
    inside the frame, replace it with the full frame (or a centered crop when
    the original already is the full frame)."""
    span_x = box.x_max - box.x_min
    span_y = box.y_max - box.y_min
    dx = 0.4 * span_x * rng.choice([1.0, -1.0])
    dy = 0.4 * span_y * rng.choice([1.0, -1.0])
    if box.x_max + dx > 1.0 or box.x_min + dx < 0.0:
        dx = -dx
    if box.y_max + dy > 1.0 or box.y_min + dy < 0.0:
        dy = -dy
    shifted = BBox(box.x_min + dx, box.y_min + dy, box.x_max + dx, box.y_max + dy)
    if validate_bbox(shifted):  # flipped shift still leaves the frame
        shifted = BBox(0.0, 0.0, 1.0, 1.0)
    if shifted == box:  # original was the full frame
        shifted = BBox(0.2, 0.2, 0.8, 0.8)
    return shifted.as_list()


def corrupt(sample: OperatorSample, rule: str, seed: int = 0, tau: float = 0.5) -> dict:
    """Deterministic corrupted target for (sample, rule, seed); changes
    exactly the fields the rule names. Raises InapplicableRule when the
    sample lacks the field or the flip cannot cross the gate boundary."""
    target = dict(sample.target)
    if rule in STEP_RULES and sample.operator != "step":
        raise InapplicableRule(f"{rule} applies to step samples only")
    if rule in CMP_RULES and sample.operator != "cmp":
        raise InapplicableRule(f"{rule} applies to cmp samples only")

    if rule == "R1":
        o = float(target["salience"])
        flipped = round(1.0 - o, 6)
        if (o > tau) == (flipped > tau):
            raise InapplicableRule(f"salience flip {o}->{flipped} stays on one side of tau={tau}")
        target["salience"] = flipped
        if flipped > 0 and not str(target.get("summary", "")).strip():
            raise InapplicableRule("flip would need a summary the sample does not have")
        return target
    if rule == "R2":
        if target.get("roi") is None:
            raise InapplicableRule("sample has no roi")
        rng = _rule_rng(sample, rule, seed)
        target["roi"] = _corrupt_roi(BBox.from_list(target["roi"]), rng)
        return target
    if rule == "R3":
        if str(target.get("summary", "")) == GENERIC_SUMMARY:
            target["summary"] = GENERIC_SUMMARY + " (unspecified)"
        else:
            target["summary"] = GENERIC_SUMMARY
        return target
    if rule == "R4":
        target["retrieve"] = 1 - int(target["retrieve"])
        return target
    if rule == "R5":
        if not target.get("retained_rois"):
            raise InapplicableRule("sample retains no identifiers to drop")
        target["retained_rois"] = []
        return target
    if rule == "R6":
        rng = _rule_rng(sample, rule, seed)
        claim = rng.choice(UNFULFILLED_CLAIMS)
        target["summary"] = f"{target['summary']} {claim}"
        return target
    raise InapplicableRule(f"unknown rule {rule!r}")


def build_preference_pairs(
    samples: list[OperatorSample], seed: int = 0, tau: float = 0.5
) -> list[PreferencePair]:
    """Candidate (chosen, rejected) pairs: every applicable rule per sample."""
    pairs = []
    for sample in samples:
        rules = STEP_RULES if sample.operator == "step" else CMP_RULES
        if sample.operator not in ("step", "cmp"):
            continue
        for rule in rules:
            try:
                rejected = corrupt(sample, rule, seed=seed, tau=tau)
            except InapplicableRule:
                continue
            pairs.append(
                PreferencePair(
                    operator=sample.operator,
                    pair_id=_sample_id(sample.sample_id, rule, seed),
                    input_context=sample.input_context,
                    chosen=dict(sample.target),
                    rejected=rejected,
                    corruption_rule=rule,
                )
            )
    return pairs


JUDGE_PREFERENCE_RUBRIC = """\
Prefer the candidate that better preserves task-relevant state, maintains
visual grounding, and provides useful downstream context."""


def judge_filter(
    pairs: list[PreferencePair],
    judge_backend,
    backend_config: BackendConfig,
    seed: int = 0,
    rubric: str = "preference_v1",
    report: QualityReport | None = None,
) -> list[PreferencePair]:
    """Keep a pair iff the judge strictly prefers the chosen side; A/B
    presentation order is randomized per pair to cancel position bias. Judge
    failures and ties drop the pair (counted, never imputed)."""
    report = report if report is not None else QualityReport()
    rng = random.Random(f"{seed}|judge-order")
    kept: list[PreferencePair] = []
    report.pairs_built += len(pairs)
    for pair in pairs:
        chosen_is_a = rng.random() < 0.5
        side_a = pair.chosen if chosen_is_a else pair.rejected
        side_b = pair.rejected if chosen_is_a else pair.chosen
        context = "\n".join(
            [
                JUDGE_PREFERENCE_RUBRIC,
                f"INPUT:\n{pair.input_context['text']}",
                f"CANDIDATE A:\n{json.dumps(side_a, ensure_ascii=False, sort_keys=True)}",
                f"CANDIDATE B:\n{json.dumps(side_b, ensure_ascii=False, sort_keys=True)}",
            ]
        )
        req = JudgeRequest(rubric=rubric, context_text=context, pairwise=True)
        try:
            verdict, _meta = invoke_judge(judge_backend, req, backend_config)
        except ParseFailure:
            report.judge_failures += 1
            continue
        if verdict.preferred == "tie" or verdict.preferred is None:
            report.judge_ties += 1
            continue
        preferred_chosen = (verdict.preferred == "A") == chosen_is_a
        if preferred_chosen:
            kept.append(replace(pair, judge_margin=verdict.score))
    report.pairs_kept += len(kept)
    return kept


# --- schema validation and export ----------------------------------------------


def validate_sample(sample: OperatorSample) -> None:
    """Exported targets must satisfy the same schemas the backends enforce
    at inference time (including subset rules against the sample's own
    input context)."""
    target = sample.target
    if sample.operator == "step":
        output, warnings = parse_step_output(target)
        if warnings:
            raise ValueError(f"step sample {sample.sample_id} not clean: {warnings}")
    elif sample.operator == "cmp":
        payload = json.loads(sample.input_context["text"])
        valid_ids = tuple(rid for e in payload["entries"] for rid in e["roi_ids"])
        _output, warnings = parse_compress_output(target, valid_ids, max_retained=10**6)
        if warnings:
            raise ValueError(f"cmp sample {sample.sample_id} not clean: {warnings}")
    elif sample.operator == "write":
        goal = TaskGoal(text="placeholder")
        req = WriteRequest(
            goal=goal,
            outcome=target["outcome"],
            entries=(),
            roi_ids=tuple(target.get("retained_rois", [])),
        )
        _output, warnings = parse_write_output(target, req, max_retained=10**6)
        if warnings:
            raise ValueError(f"write sample {sample.sample_id} not clean: {warnings}")
    elif sample.operator == "sel":
        candidate_ids = tuple(sample.provenance.get("candidate_ids", target["selected"]))
        _output, warnings = parse_select_output({"selected": target["selected"]}, candidate_ids)
        if warnings:
            raise ValueError(f"sel sample {sample.sample_id} not clean: {warnings}")
    else:
        raise ValueError(f"unknown operator {sample.operator!r}")


def _write_jsonl(path: Path, records: list[dict]) -> dict:
    lines = [json.dumps(r, ensure_ascii=False, sort_keys=True) for r in records]
    payload = ("\n".join(lines) + "\n") if lines else ""
    path.write_text(payload, encoding="utf-8")
    digest = hashlib.sha256(payload.encode("utf-8")).hexdigest()
    sidecar = {"sha256": digest, "records": len(records)}
    path.with_suffix(path.suffix + ".sha256").write_text(
        json.dumps(sidecar, sort_keys=True) + "\n", encoding="utf-8"
    )
    return sidecar


def export_datasets(
    samples: list[OperatorSample], pairs: list[PreferencePair], out_dir: str | Path
) -> dict:
    """Write the six newline-delimited datasets plus checksum sidecars;
    every record is schema-validated before it lands."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {}
    for operator, filename in DATASET_FILES.items():
        selected = [s for s in samples if s.operator == operator]
        for sample in selected:
            validate_sample(sample)
        manifest[filename] = _write_jsonl(out / filename, [s.to_dict() for s in selected])
    for operator, filename in DPO_FILES.items():
        selected = [p for p in pairs if p.operator == operator]
        manifest[filename] = _write_jsonl(out / filename, [p.to_dict() for p in selected])
    return manifest


def import_dataset(path: str | Path) -> list[dict]:
    """Read one exported .jsonl, verifying the checksum sidecar first."""
    path = Path(path)
    sidecar_path = path.with_suffix(path.suffix + ".sha256")
    if not sidecar_path.exists():
        raise BundleError(f"missing checksum sidecar for {path.name}")
    sidecar = json.loads(sidecar_path.read_text(encoding="utf-8"))
    payload = path.read_text(encoding="utf-8")
    digest = hashlib.sha256(payload.encode("utf-8")).hexdigest()
    if digest != sidecar["sha256"]:
        raise BundleError(f"{path.name}: checksum mismatch against sidecar")
    records = [json.loads(line) for line in payload.splitlines() if line.strip()]
    if len(records) != sidecar["records"]:
        raise BundleError(
            f"{path.name}: {len(records)} records but sidecar declares {sidecar['records']}"
        )
    return records


def curate_corpus(
    corpus_dir: str | Path,
    out_dir: str | Path,
    judge_backend,
    backend_config: BackendConfig,
    config: CurationConfig | None = None,
    seed: int = 0,
) -> QualityReport:
    """End-to-end pipeline: load bundles, build the four SFT datasets, the
    DPO pairs, filter through the judge, and export with checksums."""
    config = config or CurationConfig()
    bundles = load_corpus(corpus_dir)
    out = Path(out_dir)
    asset_dir = out / "assets"
    report = QualityReport(trajectories=len(bundles))

    samples: list[OperatorSample] = []
    for bundle in bundles:
        samples.extend(build_step_dataset(bundle, report))
        samples.extend(build_cmp_dataset(bundle, config, report, asset_dir=asset_dir))
        write_sample = build_write_dataset(bundle, config, report, asset_dir=asset_dir)
        if write_sample is not None:
            samples.append(write_sample)
    bank = build_seed_bank(bundles, config)
    task_by_episode = {b.episode_id: b.task_id for b in bundles}
    for bundle in bundles:
        samples.extend(build_sel_dataset(bundle, bank, task_by_episode, config, report))

    pairs = build_preference_pairs(
        [s for s in samples if s.operator in ("step", "cmp")], seed=seed, tau=config.wm.tau
    )
    kept = judge_filter(
        pairs, judge_backend, backend_config, seed=seed,
        rubric=config.judge_rubric, report=report,
    )
    export_datasets(samples, kept, out)
    (out / "curation_report.json").write_text(
        json.dumps(report.to_dict(), sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    return report
