"""Command-line surface: ``run``, ``curate``, ``eval``, ``bank``.

Configuration comes from a JSON file (--config), with flags overriding the
file and the API key coming only from the environment (GUIMEM_API_KEY by
default). Validation happens fully before any side effect. Exit codes:
0 ok, 2 config error, 3 runtime abort.

Offline mode (--offline) swaps every model role for the seeded scripted
backend and a virtual clock, making whole runs byte-reproducible.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

from .backends import BackendConfig, RemoteChatBackend, ScriptedBackend
from .backends.embedder import HashEmbedder
from .backends.schemas import (
    ROLE_BACKBONE,
    ROLE_COMPRESS,
    ROLE_JUDGE,
    ROLE_SELECT,
    ROLE_STEP,
    ROLE_WRITE,
)
from .backends.scripted import offline_script
from .core import TaskGoal
from .curation import CurationConfig, curate_corpus
from .engine import (
    BackendRig,
    EngineConfig,
    EpisodeStatus,
    RealClock,
    ReplayFrameSource,
    StrategyMode,
    VirtualClock,
    run_episode,
    save_episode_record,
)
from .episodic import (
    DuplicateId,
    EpisodicConfig,
    RetrievalParams,
    bank_append,
    bank_load,
    bank_new,
    bank_save,
    bank_stats,
    bank_verify,
    entry_load,
    entry_save,
)
from .evaluation import (
    MatchPolicy,
    aggregate,
    load_benchmark,
    load_screenshots,
    render_table,
    score_episode_record,
)
from .working_memory import WMConfig

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

ROLES = (ROLE_STEP, ROLE_COMPRESS, ROLE_WRITE, ROLE_SELECT, ROLE_BACKBONE, ROLE_JUDGE)


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    """Validated view over the config file plus flag overrides."""

    strategy: StrategyMode = StrategyMode.WM_PLUS_EM
    paths: dict = field(default_factory=dict)
    engine: EngineConfig = field(default_factory=EngineConfig)
    curation: CurationConfig = field(default_factory=CurationConfig)
    match: MatchPolicy = field(default_factory=MatchPolicy)
    backends: dict = field(default_factory=dict)  # role -> BackendConfig
    embed_dim: int = 64
    judge_metrics: bool = False
    seed: int = 0
    concurrency: int = 1
    keep_going: bool = False
    offline: bool = False


def _positive(name: str, value, minimum=0):
    if value < minimum:
        raise ConfigError(f"{name} must be >= {minimum}, got {value}")
    return value


def load_config(path: str | None, args) -> RunConfig:
    raw: dict = {}
    if path:
        cfg_path = Path(path)
        if not cfg_path.exists():
            raise ConfigError(f"config file not found: {cfg_path}")
        try:
            raw = json.loads(cfg_path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from exc

    mem = raw.get("memory", {})
    tau = float(mem.get("tau", 0.5))
    if not (0.0 <= tau <= 1.0):
        raise ConfigError(f"memory.tau must be in [0, 1], got {tau}")
    wm = WMConfig(
        tau=tau,
        n_recent=_positive("memory.n_recent", int(mem.get("n_recent", 8)), 1),
        k_roi=_positive("memory.k_roi", int(mem.get("k_roi", 4))),
        max_roi_per_block=_positive(
            "memory.max_roi_per_block", int(mem.get("max_roi_per_block", 2))
        ),
        render_budget=_positive("memory.render_budget", int(mem.get("render_budget", 2000)), 1),
    )
    try:
        params = RetrievalParams(
            lambda_v=float(mem.get("lambda_v", 0.5)),
            lambda_g=float(mem.get("lambda_g", 0.5)),
            top_k=int(mem.get("top_k", 5)),
        )
    except ValueError as exc:
        raise ConfigError(f"invalid retrieval params: {exc}") from exc
    episodic = EpisodicConfig(
        params=params,
        max_selected=_positive("memory.max_selected", int(mem.get("max_selected", 2))),
        visual_key=mem.get("visual_key", "final_screenshot"),
    )
    if episodic.visual_key not in ("final_screenshot", "roi_mean"):
        raise ConfigError(f"memory.visual_key must be final_screenshot|roi_mean")

    run = raw.get("run", {})
    strategy_name = getattr(args, "strategy", None) or raw.get("strategy", "wm_plus_em")
    try:
        strategy = StrategyMode(strategy_name)
    except ValueError:
        raise ConfigError(
            f"unknown strategy {strategy_name!r}; expected one of "
            f"{[m.value for m in StrategyMode]}"
        )
    engine = EngineConfig(
        strategy=strategy,
        wm=wm,
        episodic=episodic,
        episodic_roi_allowance=_positive(
            "memory.episodic_roi_allowance", int(mem.get("episodic_roi_allowance", 2))
        ),
        max_steps=_positive("run.max_steps", int(run.get("max_steps", 50)), 1),
        write_back=bool(run.get("write_back", True)),
        context_char_budget=_positive(
            "run.context_char_budget", int(run.get("context_char_budget", 6000)), 100
        ),
        include_past_screenshots=bool(run.get("include_past_screenshots", False)),
    )

    match_cfg = raw.get("match", {})
    match = MatchPolicy(
        radius=float(match_cfg.get("radius", 0.14)),
        f1_min=float(match_cfg.get("f1_min", 0.5)),
    )

    backends_cfg = raw.get("backends", {})
    backends: dict[str, BackendConfig] = {}
    for role in ROLES:
        role_cfg = backends_cfg.get(role, {})
        try:
            backends[role] = BackendConfig(
                endpoint=role_cfg.get("endpoint", ""),
                model=role_cfg.get("model", ""),
                timeout=float(role_cfg.get("timeout", 60.0)),
                max_retries=int(role_cfg.get("max_retries", 2)),
                temperature=float(role_cfg.get("temperature", 0.0)),
                image_detail=role_cfg.get("image_detail", "auto"),
                api_key_env=role_cfg.get("api_key_env", "GUIMEM_API_KEY"),
            )
        except ValueError as exc:
            raise ConfigError(f"backends.{role}: {exc}") from exc

    config = RunConfig(
        strategy=strategy,
        paths=raw.get("paths", {}),
        engine=engine,
        curation=CurationConfig(
            wm=wm, retrieval=params, embed_dim=int(backends_cfg.get("embed_dim", 64))
        ),
        match=match,
        backends=backends,
        embed_dim=int(backends_cfg.get("embed_dim", 64)),
        judge_metrics=bool(raw.get("judge_metrics", False)),
        seed=args.seed if args.seed is not None else int(raw.get("seed", 0)),
        concurrency=(
            args.concurrency if args.concurrency is not None else int(raw.get("concurrency", 1))
        ),
        keep_going=bool(args.keep_going or raw.get("keep_going", False)),
        offline=bool(args.offline or raw.get("offline", False)),
    )
    _positive("concurrency", config.concurrency, 1)
    return config


def _require_path(config: RunConfig, key: str, must_exist: bool = True) -> Path:
    value = config.paths.get(key)
    if not value:
        raise ConfigError(f"paths.{key} is required for this command")
    path = Path(value)
    if must_exist and not path.exists():
        raise ConfigError(f"paths.{key} does not exist: {path}")
    return path


def _build_rig(config: RunConfig) -> BackendRig:
    if config.offline:
        return BackendRig.scripted(
            script=offline_script(config.seed), dim=config.embed_dim
        )
    backends = {}
    for role in ROLES:
        role_cfg = config.backends[role]
        if not role_cfg.endpoint and role != ROLE_JUDGE:
            raise ConfigError(f"backends.{role}.endpoint required outside --offline")
        if role_cfg.endpoint:
            audit = None
            output = config.paths.get("output")
            if output:
                audit = Path(output) / "audit" / f"{role}.jsonl"
            backends[role] = RemoteChatBackend(role_cfg, audit_path=audit)
        else:
            backends[role] = None
    return BackendRig(
        backends=backends, configs=dict(config.backends), embedder=HashEmbedder(config.embed_dim)
    )


def _judge_for(config: RunConfig, rig: BackendRig):
    if not config.judge_metrics:
        return None
    backend = rig.backends.get(ROLE_JUDGE)
    if backend is None:
        raise ConfigError("judge_metrics enabled but no judge backend configured")
    return backend


# --- run ----------------------------------------------------------------------


def _run_one_episode(config: RunConfig, bundle, traj, bank, index: int, out_dir: Path):
    if config.offline:
        rig = BackendRig.scripted(script=offline_script(config.seed), dim=config.embed_dim)
        clock = VirtualClock()
    else:
        rig = _build_rig(config)
        clock = RealClock()
    goal = TaskGoal(text=traj.goal, episode_id=traj.episode_id)
    frames = ReplayFrameSource(load_screenshots(bundle, traj), verdict=traj.outcome)
    created_at = float(len(bank.entries) + index)
    state, entry = run_episode(
        goal, frames, rig, bank, config.engine, clock=clock,
        episode_index=index, created_at=created_at if config.offline else None,
    )
    episode_dir = out_dir / "episodes" / traj.episode_id
    save_episode_record(state, episode_dir)
    if entry is not None:
        entry_save(entry, episode_dir / "entry")
    return state, entry


def cmd_run(config: RunConfig) -> int:
    bench_path = _require_path(config, "benchmark")
    out_dir = _require_path(config, "output", must_exist=False)
    bank_path = None
    if config.strategy is StrategyMode.WM_PLUS_EM:
        bank_path = _require_path(config, "bank")
        if not (bank_path / "manifest.jsonl").exists():
            raise ConfigError(f"paths.bank is not an initialized bank: {bank_path}")
    if not config.offline:
        _build_rig(config)  # fail on missing endpoints before any side effect
    bundle = load_benchmark(bench_path)
    bank = bank_load(bank_path) if bank_path else bank_new(config.embed_dim)
    if bank.dim != config.embed_dim:
        raise ConfigError(
            f"bank dim {bank.dim} != configured embed_dim {config.embed_dim}"
        )

    out_dir.mkdir(parents=True, exist_ok=True)
    results = []
    if config.concurrency > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=config.concurrency) as pool:
            futures = [
                pool.submit(_run_one_episode, config, bundle, traj, bank, i, out_dir)
                for i, traj in enumerate(bundle.trajectories)
            ]
            results = [f.result() for f in futures]
    else:
        results = [
            _run_one_episode(config, bundle, traj, bank, i, out_dir)
            for i, traj in enumerate(bundle.trajectories)
        ]

    # single-writer commit, episode order; identical rewrites are skipped
    appended = 0
    for _state, entry in results:
        if entry is None:
            continue
        try:
            bank = bank_append(bank, entry)
            appended += 1
        except DuplicateId:
            log.warning("skipping duplicate bank entry %s", entry.entry_id)
    if bank_path and config.engine.write_back and appended:
        bank_save(bank, bank_path)

    rig = None
    judge = None
    if config.judge_metrics:
        rig = BackendRig.scripted(
            script=offline_script(config.seed), dim=config.embed_dim
        ) if config.offline else _build_rig(config)
        judge = _judge_for(config, rig)
    reports = []
    aborted = 0
    for (state, _entry), traj in zip(results, bundle.trajectories):
        if state.status is EpisodeStatus.ABORTED:
            aborted += 1
        record = json.loads(
            (out_dir / "episodes" / traj.episode_id / "episode.json").read_text(encoding="utf-8")
        )
        report = score_episode_record(
            record, traj, policy=config.match, judge=judge,
            judge_config=config.backends[ROLE_JUDGE],
        )
        reports.append(report)
        report_dir = out_dir / "reports"
        report_dir.mkdir(exist_ok=True)
        (report_dir / f"{traj.episode_id}.json").write_text(
            json.dumps(report.to_dict(), sort_keys=True, indent=2), encoding="utf-8"
        )

    summary = {
        "seed": config.seed,
        "strategy": config.strategy.value,
        "split": bundle.split,
        "benchmark_stats": bundle.stats,
        "n_episodes": len(results),
        "aborted": aborted,
        "bank_appended": appended,
        "aggregate": aggregate(reports),
        "episodes": [
            {
                "episode_id": traj.episode_id,
                "status": state.status.value,
                "steps": state.t,
                "ams": report.ams,
                "traj_success": report.traj_success,
            }
            for (state, _e), traj, report in zip(results, bundle.trajectories, reports)
        ],
    }
    (out_dir / "summary.json").write_text(
        json.dumps(summary, sort_keys=True, indent=2), encoding="utf-8"
    )
    (out_dir / "summary.txt").write_text(
        render_table(summary["aggregate"]) + "\n", encoding="utf-8"
    )
    print(render_table(summary["aggregate"]))
    print(f"episodes: {len(results)}  aborted: {aborted}  bank appended: {appended}")
    if aborted and not config.keep_going:
        return EXIT_RUNTIME
    return EXIT_OK


# --- curate ---------------------------------------------------------------------


def cmd_curate(config: RunConfig) -> int:
    corpus = _require_path(config, "corpus")
    out_dir = _require_path(config, "output", must_exist=False)
    if config.offline:
        judge = ScriptedBackend(offline_script(config.seed))
    else:
        rig = _build_rig(config)
        judge = rig.backends.get(ROLE_JUDGE)
        if judge is None:
            raise ConfigError("curate outside --offline requires a judge backend")
    report = curate_corpus(
        corpus, out_dir, judge, config.backends[ROLE_JUDGE],
        config=config.curation, seed=config.seed,
    )
    for name, count in report.samples.items():
        print(f"d_{name}: {count} samples")
    print(
        f"dpo pairs: {report.pairs_kept}/{report.pairs_built} kept "
        f"(survival {report.survival_rate():.1%}, "
        f"{report.judge_ties} ties, {report.judge_failures} judge failures)"
    )
    if report.rejected_write:
        for line in report.rejected_write:
            print(f"rejected: {line}")
    return EXIT_OK


# --- eval -----------------------------------------------------------------------


def cmd_eval(config: RunConfig) -> int:
    bench_path = _require_path(config, "benchmark")
    out_dir = _require_path(config, "output")
    episodes_dir = out_dir / "episodes"
    if not episodes_dir.is_dir():
        raise ConfigError(f"no episode records under {episodes_dir}")
    bundle = load_benchmark(bench_path)
    judge = None
    if config.judge_metrics:
        rig = (
            BackendRig.scripted(script=offline_script(config.seed), dim=config.embed_dim)
            if config.offline
            else _build_rig(config)
        )
        judge = _judge_for(config, rig)
    by_id = {traj.episode_id: traj for traj in bundle.trajectories}
    reports = []
    for episode_dir in sorted(episodes_dir.iterdir()):
        record_path = episode_dir / "episode.json"
        if not record_path.exists():
            continue
        record = json.loads(record_path.read_text(encoding="utf-8"))
        traj = by_id.get(record["episode_id"])
        if traj is None:
            log.warning("no reference trajectory for %s; skipped", record["episode_id"])
            continue
        reports.append(
            score_episode_record(
                record, traj, policy=config.match, judge=judge,
                judge_config=config.backends[ROLE_JUDGE],
            )
        )
    summary = {"n_scored": len(reports), "aggregate": aggregate(reports)}
    (out_dir / "eval_summary.json").write_text(
        json.dumps(summary, sort_keys=True, indent=2), encoding="utf-8"
    )
    (out_dir / "eval_summary.txt").write_text(
        render_table(summary["aggregate"]) + "\n", encoding="utf-8"
    )
    print(render_table(summary["aggregate"]))
    return EXIT_OK


# --- bank -----------------------------------------------------------------------


def cmd_bank(config: RunConfig, args) -> int:
    action = args.bank_command
    path = Path(args.bank_path)
    if action == "init":
        if (path / "manifest.jsonl").exists():
            raise ConfigError(f"bank already initialized at {path}")
        bank_save(bank_new(args.dim or config.embed_dim), path)
        print(f"initialized empty bank (dim {args.dim or config.embed_dim}) at {path}")
        return EXIT_OK
    if not (path / "manifest.jsonl").exists():
        raise ConfigError(f"no bank at {path}")
    if action == "stats":
        stats = bank_stats(bank_load(path))
        print(json.dumps(stats, sort_keys=True, indent=2))
        return EXIT_OK
    if action == "verify":
        report = bank_verify(path)
        print(json.dumps(report, sort_keys=True, indent=2))
        return EXIT_OK if report["ok"] else EXIT_RUNTIME
    if action == "append":
        entry_dir = Path(args.entry)
        if (entry_dir / "entry").is_dir():
            entry_dir = entry_dir / "entry"  # accept an episode record dir
        if not (entry_dir / "entry.json").exists():
            raise ConfigError(f"no entry.json under {entry_dir}")
        bank = bank_load(path)
        try:
            bank = bank_append(bank, entry_load(entry_dir))
        except DuplicateId as exc:
            print(f"append failed: duplicate entry id {exc}", file=sys.stderr)
            return EXIT_RUNTIME
        bank_save(bank, path)
        print(f"appended; bank now holds {len(bank)} entries")
        return EXIT_OK
    raise ConfigError(f"unknown bank subcommand {action!r}")


# --- entry point -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="guimem",
        description="Working/episodic memory runtime for long-horizon GUI agents.",
    )
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--seed", type=int, default=None, help="override config seed")
    parser.add_argument(
        "--concurrency", type=int, default=None, help="episodes scored in parallel"
    )
    parser.add_argument(
        "--keep-going", action="store_true", help="exit 0 even when episodes abort"
    )
    parser.add_argument(
        "--offline", action="store_true", help="scripted backends only; no network"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="replay the benchmark under a strategy")
    run_p.add_argument(
        "--strategy", choices=[m.value for m in StrategyMode], default=None,
        help="override the configured strategy",
    )

    sub.add_parser("curate", help="build operator SFT datasets and DPO pairs")
    sub.add_parser("eval", help="score existing episode records")

    bank_p = sub.add_parser("bank", help="episodic bank maintenance")
    bank_sub = bank_p.add_subparsers(dest="bank_command", required=True)
    init_p = bank_sub.add_parser("init", help="create an empty bank")
    init_p.add_argument("bank_path")
    init_p.add_argument("--dim", type=int, default=None)
    append_p = bank_sub.add_parser("append", help="append an entry from an episode record")
    append_p.add_argument("bank_path")
    append_p.add_argument("entry")
    stats_p = bank_sub.add_parser("stats", help="entry count, dim, outcome histogram")
    stats_p.add_argument("bank_path")
    verify_p = bank_sub.add_parser("verify", help="check checksums, strides, roi hashes")
    verify_p.add_argument("bank_path")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        config = load_config(args.config, args)
        if args.command == "run":
            return cmd_run(config)
        if args.command == "curate":
            return cmd_curate(config)
        if args.command == "eval":
            return cmd_eval(config)
        if args.command == "bank":
            return cmd_bank(config, args)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # runtime failures map to the abort code
        log.error("run failed: %s", exc)
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
