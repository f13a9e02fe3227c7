"""Seeded generators for synthetic benchmark bundles and curation corpora.

These exist for smoke runs, demos, and tests: they produce structurally
valid inputs (aligned frames/actions, chronological subgoals, valid boxes)
with deterministic content for a given seed. They make no attempt at visual
realism; frames are small random rasters or omitted entirely.
"""

from __future__ import annotations

import json
import random
from pathlib import Path

import numpy as np

from .core import write_png
from .evaluation import BENCH_FORMAT

TASK_FAMILIES = (
    "settings-toggle",
    "send-message",
    "book-ticket",
    "search-product",
    "update-profile",
)

ACTION_TEMPLATES = (
    "click({x:.3f}, {y:.3f})",
    "scroll(down)",
    "scroll(up)",
    'type_text("sample input {i}")',
    "key(enter)",
)

EVENT_DESCRIPTIONS = (
    "opened the {noun} screen",
    "selected the {noun} option",
    "entered text into the {noun} field",
    "scrolled through the {noun} list",
    "confirmed the {noun} dialog",
)

NOUNS = ("settings", "search", "payment", "profile", "notification", "calendar")


def _frame_pixels(rng: random.Random, size: int = 16) -> np.ndarray:
    np_rng = np.random.default_rng(rng.randrange(2**63))
    return np_rng.integers(0, 256, size=(size, size, 3), dtype=np.uint8)


def _reference_action(rng: random.Random, i: int, last: bool) -> str:
    if last:
        return "complete"
    template = rng.choice(ACTION_TEMPLATES)
    return template.format(x=rng.uniform(0.05, 0.95), y=rng.uniform(0.05, 0.95), i=i)


def make_benchmark(
    out_dir: str | Path,
    n_traj: int = 5,
    seed: int = 0,
    split: str = "test",
    lengths: list[int] | None = None,
    min_len: int = 4,
    max_len: int = 12,
    with_frames: bool = False,
    declared_stats: dict | None = None,
) -> Path:
    """Write a benchmark bundle; returns the bundle directory.

    ``lengths`` pins per-trajectory step counts (len must equal n_traj);
    ``declared_stats`` overrides the stats block (for loader-rejection
    tests). Frames are omitted (null) unless ``with_frames``.
    """
    rng = random.Random(seed)
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    if lengths is not None and len(lengths) != n_traj:
        raise ValueError("lengths must have one entry per trajectory")
    trajectories = []
    for i in range(n_traj):
        n_steps = lengths[i] if lengths is not None else rng.randint(min_len, max_len)
        episode_id = f"{split}-{i:04d}"
        task = rng.choice(TASK_FAMILIES)
        frames: list[str | None] = []
        for t in range(1, n_steps + 1):
            if with_frames:
                rel = f"frames/{episode_id}/frame_{t:04d}.png"
                path = root / rel
                path.parent.mkdir(parents=True, exist_ok=True)
                write_png(path, _frame_pixels(rng))
                frames.append(rel)
            else:
                frames.append(None)
        actions = [
            _reference_action(rng, t, last=(t == n_steps)) for t in range(1, n_steps + 1)
        ]
        trajectories.append(
            {
                "episode_id": episode_id,
                "goal": f"{task} task {i}: " + rng.choice(NOUNS),
                "task_id": task,
                "outcome": rng.choice(["success", "success", "failure"]),
                "frames": frames,
                "reference_actions": actions,
            }
        )
    if declared_stats is not None:
        stats = declared_stats
    else:
        n_steps = sum(len(t["reference_actions"]) for t in trajectories)
        stats = {
            "n_traj": n_traj,
            "n_steps": n_steps,
            "mean_len": round(n_steps / n_traj, 3) if n_traj else 0.0,
        }
    doc = {
        "format": BENCH_FORMAT,
        "split": split,
        "stats": stats,
        "trajectories": trajectories,
    }
    (root / "benchmark.json").write_text(
        json.dumps(doc, ensure_ascii=False, indent=2), encoding="utf-8"
    )
    return root


def spread_lengths(n_traj: int, total_steps: int, seed: int = 0, min_len: int = 2) -> list[int]:
    """Deterministic per-trajectory lengths summing exactly to total_steps."""
    if total_steps < n_traj * min_len:
        raise ValueError("total_steps too small for the trajectory count")
    rng = random.Random(seed)
    lengths = [min_len] * n_traj
    remaining = total_steps - n_traj * min_len
    for _ in range(remaining):
        lengths[rng.randrange(n_traj)] += 1
    return lengths


def make_curation_corpus(
    out_dir: str | Path,
    n_traj: int = 6,
    seed: int = 0,
    min_frames: int = 8,
    max_frames: int = 16,
    with_frames: bool = True,
) -> Path:
    """Write a corpus of trajectory bundles (frames, frame annotations,
    subgoals, meta); returns the corpus directory."""
    rng = random.Random(seed)
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    for i in range(n_traj):
        episode_id = f"traj-{i:04d}"
        bundle = root / episode_id
        (bundle / "frames").mkdir(parents=True, exist_ok=True)
        task = TASK_FAMILIES[i % len(TASK_FAMILIES)]
        n_frames = rng.randint(min_frames, max_frames)

        # chronological, non-overlapping subgoals covering the frame span
        n_subgoals = rng.randint(2, min(4, max(2, n_frames // 3)))
        cuts = sorted(rng.sample(range(2, n_frames), n_subgoals - 1)) if n_subgoals > 1 else []
        bounds = [1] + cuts + [n_frames]
        subgoals = []
        for ordinal in range(1, n_subgoals + 1):
            first = bounds[ordinal - 1] + (0 if ordinal == 1 else 1)
            last = bounds[ordinal]
            subgoals.append(
                {
                    "ordinal": ordinal,
                    "description": f"{task} phase {ordinal}: "
                    + rng.choice(EVENT_DESCRIPTIONS).format(noun=rng.choice(NOUNS)),
                    "frame_range": [first, last],
                }
            )

        annotations = []
        for t in range(1, n_frames + 1):
            occurred = rng.random() < 0.7
            if not occurred:
                annotations.append(
                    {
                        "frame_index": t,
                        "action_occurred": False,
                        "event_description": "",
                        "input_type": "none",
                        "key_sequence": None,
                        "roi_box": None,
                    }
                )
                continue
            input_type = rng.choice(["click", "click", "type", "key", "scroll", "drag"])
            x0 = rng.uniform(0.05, 0.6)
            y0 = rng.uniform(0.05, 0.6)
            box = [x0, y0, x0 + rng.uniform(0.15, 0.35), y0 + rng.uniform(0.15, 0.35)]
            annotations.append(
                {
                    "frame_index": t,
                    "action_occurred": True,
                    "event_description": rng.choice(EVENT_DESCRIPTIONS).format(
                        noun=rng.choice(NOUNS)
                    ),
                    "input_type": input_type,
                    "key_sequence": "ctrl+a" if input_type in ("type", "key") else None,
                    "roi_box": None if rng.random() < 0.15 else box,
                }
            )
            if with_frames:
                write_png(
                    bundle / "frames" / f"frame_{t:04d}.png", _frame_pixels(rng)
                )
        if with_frames:
            # ensure every frame exists, including no-event ones
            for t in range(1, n_frames + 1):
                path = bundle / "frames" / f"frame_{t:04d}.png"
                if not path.exists():
                    write_png(path, _frame_pixels(rng))

        (bundle / "frame_annotations.jsonl").write_text(
            "\n".join(json.dumps(a, ensure_ascii=False) for a in annotations) + "\n",
            encoding="utf-8",
        )
        (bundle / "subgoals.json").write_text(
            json.dumps(subgoals, ensure_ascii=False, indent=2), encoding="utf-8"
        )
        (bundle / "meta.json").write_text(
            json.dumps(
                {
                    "episode_id": episode_id,
                    "goal": f"{task}: complete the {rng.choice(NOUNS)} workflow",
                    "task_id": task,
                    "outcome": rng.choice(["success", "failure"]),
                },
                ensure_ascii=False,
                indent=2,
            ),
            encoding="utf-8",
        )
    return root
