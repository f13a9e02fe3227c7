from __future__ import annotations

import hashlib
import json
from pathlib import Path

from guimem import cli
from guimem.backends.schemas import ROLE_BACKBONE, TransportFailure
from guimem.backends.scripted import offline_script
from guimem.synthetic import make_benchmark, make_curation_corpus


def write_config(tmp_path: Path, **overrides) -> Path:
    config = {
        "strategy": "wm_plus_em",
        "paths": {
            "benchmark": str(tmp_path / "bench"),
            "bank": str(tmp_path / "bank"),
            "output": str(tmp_path / "out"),
            "corpus": str(tmp_path / "corpus"),
        },
        "memory": {"n_recent": 3, "k_roi": 4},
        "run": {"max_steps": 20},
    }
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(config.get(key), dict):
            config[key].update(value)
        else:
            config[key] = value
    path = tmp_path / "config.json"
    path.write_text(json.dumps(config))
    return path


def setup_run(tmp_path: Path, n_traj=4, **overrides) -> Path:
    make_benchmark(tmp_path / "bench", n_traj=n_traj, seed=2, min_len=3, max_len=7)
    assert cli.main(["bank", "init", str(tmp_path / "bank"), "--dim", "64"]) == 0
    return write_config(tmp_path, **overrides)


# --- config validation -----------------------------------------------------------


def test_missing_config_file_is_config_error(tmp_path):
    rc = cli.main(["--config", str(tmp_path / "nope.json"), "--offline", "run"])
    assert rc == cli.EXIT_CONFIG


def test_invalid_strategy_is_config_error(tmp_path):
    config = setup_run(tmp_path, strategy="telepathy")
    assert cli.main(["--config", str(config), "--offline", "run"]) == cli.EXIT_CONFIG


def test_bad_tau_is_config_error(tmp_path):
    config = setup_run(tmp_path, memory={"tau": 1.5})
    assert cli.main(["--config", str(config), "--offline", "run"]) == cli.EXIT_CONFIG


def test_missing_bank_with_wm_plus_em_is_config_error_before_side_effects(tmp_path):
    make_benchmark(tmp_path / "bench", n_traj=2, seed=2)
    config = write_config(tmp_path)  # bank dir never initialized
    rc = cli.main(["--config", str(config), "--offline", "run"])
    assert rc == cli.EXIT_CONFIG
    assert not (tmp_path / "out").exists()


def test_wm_only_strategy_does_not_need_bank(tmp_path):
    make_benchmark(tmp_path / "bench", n_traj=2, seed=2)
    config = write_config(tmp_path, strategy="wm_only")
    assert cli.main(["--config", str(config), "--offline", "run"]) == 0


def test_remote_run_without_endpoints_is_config_error(tmp_path):
    config = setup_run(tmp_path)
    rc = cli.main(["--config", str(config), "run"])  # no --offline
    assert rc == cli.EXIT_CONFIG


# --- run ---------------------------------------------------------------------------


def test_offline_run_writes_episodes_and_summary(tmp_path):
    config = setup_run(tmp_path, n_traj=4)
    rc = cli.main(["--config", str(config), "--offline", "--seed", "5", "run"])
    assert rc == 0
    episodes = sorted((tmp_path / "out" / "episodes").iterdir())
    assert len(episodes) == 4
    summary = json.loads((tmp_path / "out" / "summary.json").read_text())
    assert summary["n_episodes"] == 4
    assert summary["aborted"] == 0
    assert (tmp_path / "out" / "summary.txt").exists()


def test_offline_run_grows_bank_by_completed_episodes(tmp_path):
    config = setup_run(tmp_path, n_traj=3)
    assert cli.main(["--config", str(config), "--offline", "--seed", "5", "run"]) == 0
    stats_out = json.loads((tmp_path / "bank" / "manifest.jsonl").read_text().splitlines()[0])
    summary = json.loads((tmp_path / "out" / "summary.json").read_text())
    non_aborted = sum(1 for e in summary["episodes"] if e["status"] != "aborted")
    assert summary["bank_appended"] == non_aborted


def test_two_runs_same_seed_byte_identical(tmp_path):
    make_benchmark(tmp_path / "bench", n_traj=3, seed=2, min_len=3, max_len=7)
    digests = []
    for run_dir in ("run1", "run2"):
        bank = tmp_path / run_dir / "bank"
        assert cli.main(["bank", "init", str(bank), "--dim", "64"]) == 0
        config = write_config(
            tmp_path,
            paths={
                "benchmark": str(tmp_path / "bench"),
                "bank": str(bank),
                "output": str(tmp_path / run_dir / "out"),
            },
        )
        assert cli.main(["--config", str(config), "--offline", "--seed", "9", "run"]) == 0
        out = tmp_path / run_dir / "out"
        blobs = [(out / "summary.json").read_bytes(), (out / "summary.txt").read_bytes()]
        for episode_dir in sorted((out / "episodes").iterdir()):
            blobs.append((episode_dir / "episode.json").read_bytes())
        digests.append(hashlib.sha256(b"".join(blobs)).hexdigest())
    assert digests[0] == digests[1]


def test_concurrency_does_not_change_results(tmp_path):
    make_benchmark(tmp_path / "bench", n_traj=4, seed=2, min_len=3, max_len=7)
    digests = []
    for label, workers in (("seq", "1"), ("par", "3")):
        bank = tmp_path / label / "bank"
        assert cli.main(["bank", "init", str(bank), "--dim", "64"]) == 0
        config = write_config(
            tmp_path,
            paths={
                "benchmark": str(tmp_path / "bench"),
                "bank": str(bank),
                "output": str(tmp_path / label / "out"),
            },
        )
        rc = cli.main(
            ["--config", str(config), "--offline", "--seed", "4",
             "--concurrency", workers, "run"]
        )
        assert rc == 0
        digests.append(
            hashlib.sha256((tmp_path / label / "out" / "summary.json").read_bytes()).hexdigest()
        )
    assert digests[0] == digests[1]


def test_keep_going_with_scripted_fault(tmp_path, monkeypatch):
    config = setup_run(tmp_path, n_traj=3)

    def fault(key, payload, n):
        raise TransportFailure("injected fault")

    def faulty_script(seed):
        script = dict(offline_script(seed))
        script[(ROLE_BACKBONE, "2")] = fault  # second step of every episode
        return script

    monkeypatch.setattr(cli, "offline_script", faulty_script)
    rc = cli.main(["--config", str(config), "--offline", "--seed", "5", "run"])
    assert rc == cli.EXIT_RUNTIME
    summary = json.loads((tmp_path / "out" / "summary.json").read_text())
    aborted = summary["aborted"]
    assert aborted >= 1

    rc = cli.main(["--config", str(config), "--offline", "--seed", "5", "--keep-going", "run"])
    assert rc == 0


def test_strategy_flag_overrides_config(tmp_path):
    config = setup_run(tmp_path, n_traj=2)
    rc = cli.main(
        ["--config", str(config), "--offline", "run", "--strategy", "no_history"]
    )
    assert rc == 0
    summary = json.loads((tmp_path / "out" / "summary.json").read_text())
    assert summary["strategy"] == "no_history"


# --- eval --------------------------------------------------------------------------


def test_eval_reference_only_omits_judge_columns(tmp_path):
    config = setup_run(tmp_path, n_traj=2)
    assert cli.main(["--config", str(config), "--offline", "run"]) == 0
    assert cli.main(["--config", str(config), "--offline", "eval"]) == 0
    summary = json.loads((tmp_path / "out" / "eval_summary.json").read_text())
    for row in summary["aggregate"]["groups"]:
        assert row["vam"] is None and row["tps"] is None and row["mcs"] is None


def test_eval_no_history_reports_mcs_zero(tmp_path):
    config = setup_run(tmp_path, n_traj=2, strategy="no_history", judge_metrics=True)
    assert cli.main(["--config", str(config), "--offline", "run"]) == 0
    assert cli.main(["--config", str(config), "--offline", "eval"]) == 0
    summary = json.loads((tmp_path / "out" / "eval_summary.json").read_text())
    all_row = [r for r in summary["aggregate"]["groups"] if r["length_bin"] == "all"][0]
    assert all_row["mcs"] == 0.0
    assert all_row["vam"] is not None  # judge ran, only MCS is defined-zero


def test_eval_rescoring_is_stable(tmp_path):
    config = setup_run(tmp_path, n_traj=2, judge_metrics=True)
    assert cli.main(["--config", str(config), "--offline", "--seed", "3", "run"]) == 0
    assert cli.main(["--config", str(config), "--offline", "--seed", "3", "eval"]) == 0
    first = (tmp_path / "out" / "eval_summary.json").read_bytes()
    assert cli.main(["--config", str(config), "--offline", "--seed", "3", "eval"]) == 0
    assert (tmp_path / "out" / "eval_summary.json").read_bytes() == first


def test_eval_without_records_is_config_error(tmp_path):
    config = setup_run(tmp_path)
    assert cli.main(["--config", str(config), "--offline", "eval"]) == cli.EXIT_CONFIG


# --- curate -------------------------------------------------------------------------


def test_curate_missing_corpus_is_config_error(tmp_path):
    config = write_config(tmp_path)
    assert cli.main(["--config", str(config), "--offline", "curate"]) == cli.EXIT_CONFIG


def test_curate_writes_six_datasets_with_sidecars(tmp_path, capsys):
    make_curation_corpus(tmp_path / "corpus", n_traj=4, seed=8)
    config = write_config(tmp_path)
    assert cli.main(["--config", str(config), "--offline", "--seed", "4", "curate"]) == 0
    out = tmp_path / "out"
    for name in ("d_step", "d_cmp", "d_write", "d_sel", "dpo_step", "dpo_cmp"):
        assert (out / f"{name}.jsonl").exists(), name
        assert (out / f"{name}.jsonl.sha256").exists(), name
    printed = capsys.readouterr().out
    assert "survival" in printed


def test_curate_rerun_same_seed_identical_checksums(tmp_path):
    make_curation_corpus(tmp_path / "corpus", n_traj=3, seed=8)

    def run(out_name):
        config = write_config(
            tmp_path,
            paths={"corpus": str(tmp_path / "corpus"), "output": str(tmp_path / out_name)},
        )
        assert cli.main(["--config", str(config), "--offline", "--seed", "4", "curate"]) == 0
        return {
            p.name: hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted((tmp_path / out_name).glob("*.jsonl"))
        }

    assert run("out_a") == run("out_b")


# --- bank ----------------------------------------------------------------------------


def test_bank_init_stats_empty(tmp_path, capsys):
    assert cli.main(["bank", "init", str(tmp_path / "bank"), "--dim", "8"]) == 0
    capsys.readouterr()
    assert cli.main(["bank", "stats", str(tmp_path / "bank")]) == 0
    stats = json.loads(capsys.readouterr().out)
    assert stats == {"count": 0, "dim": 8, "outcomes": {"success": 0, "failure": 0, "unknown": 0}}


def test_bank_init_twice_is_config_error(tmp_path):
    assert cli.main(["bank", "init", str(tmp_path / "bank")]) == 0
    assert cli.main(["bank", "init", str(tmp_path / "bank")]) == cli.EXIT_CONFIG


def test_bank_append_from_episode_record(tmp_path, capsys):
    config = setup_run(tmp_path, n_traj=2)
    assert cli.main(["--config", str(config), "--offline", "run"]) == 0
    episode_dirs = [
        p for p in sorted((tmp_path / "out" / "episodes").iterdir()) if (p / "entry").is_dir()
    ]
    assert episode_dirs
    assert cli.main(["bank", "init", str(tmp_path / "bank2"), "--dim", "64"]) == 0
    rc = cli.main(["bank", "append", str(tmp_path / "bank2"), str(episode_dirs[0])])
    assert rc == 0
    capsys.readouterr()
    assert cli.main(["bank", "stats", str(tmp_path / "bank2")]) == 0
    stats = json.loads(capsys.readouterr().out)
    assert stats["count"] == 1
    # appending the same entry again is a runtime failure
    rc = cli.main(["bank", "append", str(tmp_path / "bank2"), str(episode_dirs[0])])
    assert rc == cli.EXIT_RUNTIME


def test_bank_verify_detects_byte_flip(tmp_path, capsys):
    config = setup_run(tmp_path, n_traj=2)
    assert cli.main(["--config", str(config), "--offline", "run"]) == 0
    assert cli.main(["bank", "verify", str(tmp_path / "bank")]) == 0
    manifest = tmp_path / "bank" / "manifest.jsonl"
    lines = manifest.read_text().splitlines()
    if len(lines) > 1:
        lines[1] = lines[1].replace('"outcome":"', '"outcome":"X', 1)
        manifest.write_text("\n".join(lines) + "\n")
        capsys.readouterr()
        assert cli.main(["bank", "verify", str(tmp_path / "bank")]) == cli.EXIT_RUNTIME
        report = json.loads(capsys.readouterr().out)
        assert any("line 2" in err for err in report["errors"])
