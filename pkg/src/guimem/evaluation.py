"""Benchmark loading, reference-based scoring, judge-based scoring, and
report aggregation.

Benchmark format (``benchmark.json`` inside a bundle directory):
    {"format": "guimem-bench-v1", "split": "test" | "memory_seed",
     "stats": {"n_traj": N, "n_steps": S, "mean_len": M},
     "trajectories": [{"episode_id", "goal", "task_id", "outcome",
                       "frames": [png path or null, ...],
                       "reference_actions": ["click(0.5, 0.5)", ...]}]}

Frames and reference actions are parallel arrays; the loader rejects any
misalignment and recomputes the declared stats. Null frames replay as
deterministic placeholder rasters so metadata-only bundles stay runnable.

Match policy: action types must agree; point actions match within a
normalized Euclidean radius (default 0.14, boundary inclusive); text matches
on normalized equality or token-F1 >= 0.5; scrolls match on direction. The
radius and F1 floor are benchmark-specific conventions, exposed as config.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .backends.actions import parse_action
from .backends.invoke import invoke_judge
from .backends.schemas import BackendConfig, JudgeRequest, ParseFailure
from .core import Action, ActionKind, Screenshot, read_png

log = logging.getLogger(__name__)

BENCH_FORMAT = "guimem-bench-v1"

VAM_RUBRIC = "vam_v1"  # 0-3: is the predicted action semantically equivalent?
TPS_RUBRIC = "tps_v1"  # 0-10: does the sequence move the task forward?
MCS_RUBRIC = "mcs_v1"  # 0-10: does memory evolve consistently with progress?

VAM_RANGE = (0.0, 3.0)
TPS_RANGE = (0.0, 10.0)
MCS_RANGE = (0.0, 10.0)

MEAN_LEN_TOLERANCE = 0.05  # declared means are quoted to one decimal


class AlignmentError(ValueError):
    pass


class StatsMismatch(ValueError):
    pass


@dataclass(frozen=True)
class BenchmarkTrajectory:
    episode_id: str
    goal: str
    task_id: str
    outcome: str
    frames: tuple  # str | None per step
    reference_actions: tuple[str, ...]

    def __len__(self) -> int:
        return len(self.reference_actions)


@dataclass(frozen=True)
class BenchmarkBundle:
    split: str
    trajectories: tuple[BenchmarkTrajectory, ...]
    stats: dict
    root: Path

    @property
    def n_traj(self) -> int:
        return len(self.trajectories)


def computed_stats(trajectories) -> dict:
    n_traj = len(trajectories)
    n_steps = sum(len(t) for t in trajectories)
    mean_len = n_steps / n_traj if n_traj else 0.0
    return {"n_traj": n_traj, "n_steps": n_steps, "mean_len": round(mean_len, 3)}


def load_benchmark(path: str | Path) -> BenchmarkBundle:
    """Load and validate a benchmark bundle: frame/action alignment per
    trajectory, then declared stats against recomputed ones."""
    root = Path(path)
    doc_path = root / "benchmark.json" if root.is_dir() else root
    root = doc_path.parent
    doc = json.loads(doc_path.read_text(encoding="utf-8"))
    if doc.get("format") != BENCH_FORMAT:
        raise ValueError(f"unsupported benchmark format {doc.get('format')!r}")
    trajectories = []
    for rec in doc.get("trajectories", []):
        frames = tuple(rec.get("frames", []))
        actions = tuple(rec.get("reference_actions", []))
        if len(frames) != len(actions):
            raise AlignmentError(
                f"trajectory {rec.get('episode_id')!r}: {len(frames)} frames vs "
                f"{len(actions)} reference actions"
            )
        if not actions:
            raise AlignmentError(f"trajectory {rec.get('episode_id')!r} is empty")
        trajectories.append(
            BenchmarkTrajectory(
                episode_id=rec["episode_id"],
                goal=rec["goal"],
                task_id=rec.get("task_id", rec["episode_id"]),
                outcome=rec.get("outcome", "unknown"),
                frames=frames,
                reference_actions=actions,
            )
        )
    actual = computed_stats(trajectories)
    declared = doc.get("stats", {})
    for key in ("n_traj", "n_steps"):
        if key in declared and int(declared[key]) != actual[key]:
            raise StatsMismatch(
                f"declared {key}={declared[key]} but bundle has {actual[key]}"
            )
    if "mean_len" in declared:
        if abs(float(declared["mean_len"]) - actual["mean_len"]) > MEAN_LEN_TOLERANCE:
            raise StatsMismatch(
                f"declared mean_len={declared['mean_len']} but bundle has "
                f"{actual['mean_len']:.3f}"
            )
    return BenchmarkBundle(
        split=doc.get("split", "test"),
        trajectories=tuple(trajectories),
        stats=actual,
        root=root,
    )


def placeholder_frame(episode_id: str, step_index: int, size: int = 16) -> np.ndarray:
    """Deterministic stand-in raster for metadata-only benchmarks."""
    digest = hashlib.sha256(f"{episode_id}|{step_index}".encode("utf-8")).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    return rng.integers(0, 256, size=(size, size, 3), dtype=np.uint8)


def load_screenshots(bundle: BenchmarkBundle, traj: BenchmarkTrajectory) -> list[Screenshot]:
    shots = []
    for i, frame in enumerate(traj.frames, start=1):
        if frame:
            pixels = read_png(bundle.root / frame)
        else:
            pixels = placeholder_frame(traj.episode_id, i)
        shots.append(Screenshot(pixels=pixels, step_index=i, source_id=traj.episode_id))
    return shots


# --- reference-based matching ------------------------------------------------


@dataclass(frozen=True)
class MatchPolicy:
    radius: float = 0.14  # normalized Euclidean, boundary inclusive
    f1_min: float = 0.5


@dataclass(frozen=True)
class StepScore:
    matched: bool
    match_kind: str  # matched | type_mismatch | point_out_of_range | text_mismatch
    distance: float | None = None


def _normalize_text(text: str) -> str:
    return " ".join(text.casefold().split())


def token_f1(a: str, b: str) -> float:
    ta = _normalize_text(a).split()
    tb = _normalize_text(b).split()
    if not ta or not tb:
        return 1.0 if ta == tb else 0.0
    common = sum((Counter(ta) & Counter(tb)).values())
    if common == 0:
        return 0.0
    precision = common / len(ta)
    recall = common / len(tb)
    return 2 * precision * recall / (precision + recall)


def match_action(
    pred: Action, ref: Action, screen_dims=None, policy: MatchPolicy | None = None
) -> StepScore:
    """Total scoring function; never raises. ``screen_dims`` is accepted for
    interface stability but unused: coordinates are already normalized, so
    the check is resolution-invariant."""
    policy = policy or MatchPolicy()
    if pred.kind is not ref.kind:
        return StepScore(matched=False, match_kind="type_mismatch")
    kind = pred.kind
    if kind in (ActionKind.CLICK, ActionKind.LONG_PRESS):
        dx = pred.point[0] - ref.point[0]
        dy = pred.point[1] - ref.point[1]
        distance = math.hypot(dx, dy)
        if distance <= policy.radius:
            return StepScore(matched=True, match_kind="matched", distance=distance)
        return StepScore(matched=False, match_kind="point_out_of_range", distance=distance)
    if kind in (ActionKind.TYPE_TEXT, ActionKind.KEY, ActionKind.OPEN_APP):
        if _normalize_text(pred.text or "") == _normalize_text(ref.text or ""):
            return StepScore(matched=True, match_kind="matched")
        if token_f1(pred.text or "", ref.text or "") >= policy.f1_min:
            return StepScore(matched=True, match_kind="matched")
        return StepScore(matched=False, match_kind="text_mismatch")
    if kind is ActionKind.SCROLL:
        if pred.direction is ref.direction:
            return StepScore(matched=True, match_kind="matched")
        return StepScore(matched=False, match_kind="text_mismatch")
    if kind is ActionKind.OTHER:
        if _normalize_text(pred.raw) == _normalize_text(ref.raw):
            return StepScore(matched=True, match_kind="matched")
        return StepScore(matched=False, match_kind="text_mismatch")
    # payload-free kinds: wait, complete, navigate_back, navigate_home
    return StepScore(matched=True, match_kind="matched")


@dataclass(frozen=True)
class TrajectoryReport:
    episode_id: str
    strategy: str
    steps: int
    ams: float  # [0, 100]
    step_sr: float  # [0, 100]; equals ams under a single match policy
    traj_success: bool
    step_scores: tuple[StepScore, ...] = ()
    vam: float | None = None
    tps: float | None = None
    mcs: float | None = None
    judge_failures: int = 0
    tokens_in: int = 0
    tokens_out: int = 0
    wall_time: float = 0.0

    def to_dict(self) -> dict:
        return {
            "episode_id": self.episode_id,
            "strategy": self.strategy,
            "steps": self.steps,
            "ams": self.ams,
            "step_sr": self.step_sr,
            "traj_success": self.traj_success,
            "step_scores": [
                {"matched": s.matched, "match_kind": s.match_kind, "distance": s.distance}
                for s in self.step_scores
            ],
            "vam": self.vam,
            "tps": self.tps,
            "mcs": self.mcs,
            "judge_failures": self.judge_failures,
            "tokens_in": self.tokens_in,
            "tokens_out": self.tokens_out,
            "wall_time": self.wall_time,
        }


def score_trajectory(
    preds: list[Action | None],
    refs: list[Action],
    policy: MatchPolicy | None = None,
    episode_id: str = "",
    strategy: str = "",
) -> TrajectoryReport:
    """Reference-based part of the report. Predictions may stop early (the
    agent declared completion); uncovered reference steps count as misses.
    More predictions than references is malformed input."""
    if not refs:
        raise ValueError(f"trajectory {episode_id!r} has no reference actions")
    if len(preds) > len(refs):
        raise ValueError(
            f"trajectory {episode_id!r} has {len(preds)} predictions for {len(refs)} references"
        )
    policy = policy or MatchPolicy()
    scores: list[StepScore] = []
    for i, ref in enumerate(refs):
        pred = preds[i] if i < len(preds) else None
        if pred is None:
            scores.append(StepScore(matched=False, match_kind="type_mismatch"))
        else:
            scores.append(match_action(pred, ref, policy=policy))
    matched = sum(1 for s in scores if s.matched)
    ams = 100.0 * matched / len(refs)
    final_pred = preds[-1] if preds else None
    traj_success = (
        matched == len(refs)
        and final_pred is not None
        and final_pred.kind is ActionKind.COMPLETE
    )
    return TrajectoryReport(
        episode_id=episode_id,
        strategy=strategy,
        steps=len(refs),
        ams=ams,
        step_sr=ams,
        traj_success=traj_success,
        step_scores=tuple(scores),
    )


# --- judge-based metrics --------------------------------------------------------


def judge_vam(
    goal: str, pred_raw: str, ref_raw: str, step_index: int, judge, config: BackendConfig
) -> float:
    """Per-step semantic action match on the 0-3 rubric; raises ParseFailure
    on judge failure (callers flag, never impute)."""
    context = "\n".join(
        [
            f"TASK: {goal}",
            f"STEP: {step_index}",
            f"PREDICTED ACTION: {pred_raw}",
            f"REFERENCE ACTION: {ref_raw}",
            "Score 0-3: is the predicted action semantically equivalent to the"
            " reference on this screen (0 = unrelated, 3 = equivalent)?",
        ]
    )
    req = JudgeRequest(
        rubric=VAM_RUBRIC, context_text=context, score_min=VAM_RANGE[0], score_max=VAM_RANGE[1]
    )
    verdict, _meta = invoke_judge(judge, req, config)
    return float(verdict.score)


def judge_tps(goal: str, actions: list[str], judge, config: BackendConfig) -> float:
    context = "\n".join(
        [
            f"TASK: {goal}",
            "PREDICTED ACTION SEQUENCE:",
            *[f"  {i}. {a}" for i, a in enumerate(actions, start=1)],
            "Score 0-10: does this sequence move the task forward without"
            " loops, regressions, or stalling?",
        ]
    )
    req = JudgeRequest(
        rubric=TPS_RUBRIC, context_text=context, score_min=TPS_RANGE[0], score_max=TPS_RANGE[1]
    )
    verdict, _meta = invoke_judge(judge, req, config)
    return float(verdict.score)


def judge_mcs(
    goal: str,
    actions: list[str],
    memory_snapshots: list,
    judge,
    config: BackendConfig,
) -> float:
    """Memory consistency on 0-10. Defined as 0 when the strategy kept no
    memory snapshots (there is no memory whose consistency could be judged)."""
    snapshots = [s for s in memory_snapshots if s]
    if not snapshots:
        return 0.0
    context = "\n".join(
        [
            f"TASK: {goal}",
            "PREDICTED ACTION SEQUENCE:",
            *[f"  {i}. {a}" for i, a in enumerate(actions, start=1)],
            "MEMORY SNAPSHOTS PER STEP:",
            json.dumps(snapshots, sort_keys=True)[:4000],
            "Score 0-10: does the memory state evolve consistently with task"
            " progress (selections, completed subgoals, constraints, retrieved"
            " experience)?",
        ]
    )
    req = JudgeRequest(
        rubric=MCS_RUBRIC, context_text=context, score_min=MCS_RANGE[0], score_max=MCS_RANGE[1]
    )
    verdict, _meta = invoke_judge(judge, req, config)
    return float(verdict.score)


def judge_trajectory(
    report: TrajectoryReport,
    goal: str,
    pred_raws: list[str | None],
    ref_raws: list[str],
    memory_snapshots: list,
    judge,
    config: BackendConfig,
) -> TrajectoryReport:
    """Attach VAM/TPS/MCS to a reference report. Failed judge calls leave the
    metric out and bump ``judge_failures``."""
    failures = report.judge_failures
    vam_scores = []
    for i, ref_raw in enumerate(ref_raws, start=1):
        pred_raw = pred_raws[i - 1] if i - 1 < len(pred_raws) else None
        if pred_raw is None:
            vam_scores.append(0.0)  # no prediction: not equivalent by definition
            continue
        try:
            vam_scores.append(judge_vam(goal, pred_raw, ref_raw, i, judge, config))
        except ParseFailure:
            failures += 1
    vam = sum(vam_scores) / len(vam_scores) if vam_scores else None

    actions = [a for a in pred_raws if a is not None]
    tps = None
    try:
        tps = judge_tps(goal, actions, judge, config)
    except ParseFailure:
        failures += 1
    mcs = None
    try:
        mcs = judge_mcs(goal, actions, memory_snapshots, judge, config)
    except ParseFailure:
        failures += 1
    return replace(report, vam=vam, tps=tps, mcs=mcs, judge_failures=failures)


# --- episode-record scoring -------------------------------------------------------


def score_episode_record(
    record: dict,
    traj: BenchmarkTrajectory,
    policy: MatchPolicy | None = None,
    judge=None,
    judge_config: BackendConfig | None = None,
) -> TrajectoryReport:
    """Score one persisted episode record against its reference trajectory."""
    pred_raws = [step["action"] for step in record["steps"]]
    preds = [parse_action(raw) if raw is not None else None for raw in pred_raws]
    refs = [parse_action(raw) for raw in traj.reference_actions]
    report = score_trajectory(
        preds, refs, policy=policy, episode_id=traj.episode_id,
        strategy=record.get("strategy", ""),
    )
    report = replace(
        report,
        tokens_in=int(record.get("tokens_in", 0)),
        tokens_out=int(record.get("tokens_out", 0)),
        wall_time=float(record.get("wall_time", 0.0)),
    )
    if judge is not None:
        report = judge_trajectory(
            report,
            traj.goal,
            pred_raws,
            list(traj.reference_actions),
            record.get("memory_snapshots", []),
            judge,
            judge_config or BackendConfig(),
        )
    return report


# --- aggregation ---------------------------------------------------------------------


def _mean(values) -> float | None:
    values = [v for v in values if v is not None]
    return sum(values) / len(values) if values else None


def length_bin(steps: int, edges: tuple[int, ...]) -> str:
    lo = 1
    for edge in edges:
        if steps <= edge:
            return f"{lo}-{edge}"
        lo = edge + 1
    return f">{edges[-1]}" if edges else "all"


def aggregate(
    reports: list[TrajectoryReport], length_bin_edges: tuple[int, ...] = (10, 20, 40)
) -> dict:
    """Means per strategy plus per trajectory-length bin; order-invariant."""
    groups: dict = {}
    for report in reports:
        keys = [(report.strategy, "all"), (report.strategy, length_bin(report.steps, length_bin_edges))]
        for key in keys:
            groups.setdefault(key, []).append(report)
    rows = []
    for (strategy, bin_label), members in groups.items():
        rows.append(
            {
                "strategy": strategy,
                "length_bin": bin_label,
                "n": len(members),
                "ams": _mean([m.ams for m in members]),
                "step_sr": _mean([m.step_sr for m in members]),
                "traj_sr": 100.0 * sum(m.traj_success for m in members) / len(members),
                "vam": _mean([m.vam for m in members]),
                "tps": _mean([m.tps for m in members]),
                "mcs": _mean([m.mcs for m in members]),
                "tokens_in": _mean([m.tokens_in for m in members]),
                "tokens_out": _mean([m.tokens_out for m in members]),
                "wall_time": _mean([m.wall_time for m in members]),
                "judge_failures": sum(m.judge_failures for m in members),
            }
        )
    rows.sort(key=lambda r: (r["strategy"], r["length_bin"]))
    return {"groups": rows}


def _cell(value, width: int = 8) -> str:
    if value is None:
        return "-".rjust(width)
    if isinstance(value, bool):
        return str(value).rjust(width)
    if isinstance(value, float):
        return f"{value:.2f}".rjust(width)
    return str(value).rjust(width)


def render_table(summary: dict, only_bin: str | None = "all") -> str:
    """Plain-text table of the aggregate (one row per strategy by default)."""
    headers = ["strategy", "bin", "n", "AMS", "StepSR", "TrajSR", "VAM", "TPS", "MCS", "tok_in", "time"]
    lines = ["  ".join(h.rjust(12 if h == "strategy" else 8) for h in headers)]
    for row in summary["groups"]:
        if only_bin is not None and row["length_bin"] != only_bin:
            continue
        cells = [
            row["strategy"].rjust(12),
            _cell(row["length_bin"]),
            _cell(row["n"]),
            _cell(row["ams"]),
            _cell(row["step_sr"]),
            _cell(row["traj_sr"]),
            _cell(row["vam"]),
            _cell(row["tps"]),
            _cell(row["mcs"]),
            _cell(row["tokens_in"]),
            _cell(row["wall_time"]),
        ]
        lines.append("  ".join(cells))
    return "\n".join(lines)
