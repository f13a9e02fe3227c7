from __future__ import annotations

import json
import math
import random

import pytest

from guimem.backends import BackendConfig, ScriptedBackend
from guimem.backends.scripted import offline_script
from guimem.core import BBox, validate_bbox
from guimem.curation import (
    CMP_RULES,
    GENERIC_SUMMARY,
    STEP_RULES,
    BundleError,
    CurationConfig,
    FrameAnnotation,
    InapplicableRule,
    OperatorSample,
    PreferencePair,
    QualityReport,
    SubgoalAnnotation,
    TrajectoryBundle,
    build_cmp_dataset,
    build_preference_pairs,
    build_sel_dataset,
    build_seed_bank,
    build_step_dataset,
    build_write_dataset,
    corrupt,
    curate_corpus,
    derive_salience,
    export_datasets,
    import_dataset,
    judge_filter,
    load_bundle,
    load_corpus,
    retrieval_tag_frames,
    validate_sample,
)
from guimem.synthetic import make_curation_corpus
from guimem.working_memory import WMConfig

CFG = BackendConfig(max_retries=1)


def ann(i, occurred=True, input_type="click", desc=None, roi=(0.1, 0.1, 0.4, 0.4), keyseq=None):
    return FrameAnnotation(
        frame_index=i,
        action_occurred=occurred,
        event_description=("" if desc is None and not occurred else (desc or f"did thing {i}")),
        input_type=input_type if occurred else "none",
        key_sequence=keyseq,
        roi_box=BBox.from_list(roi) if (occurred and roi) else None,
    )


def bundle_of(annotations, subgoals=None, episode_id="t1", task_id="task-a", outcome="success"):
    if subgoals is None:
        last = annotations[-1].frame_index
        mid = max(2, last // 2)
        subgoals = (
            SubgoalAnnotation(1, "first half", (1, mid)),
            SubgoalAnnotation(2, "second half", (mid + 1, last)),
        )
    return TrajectoryBundle(
        episode_id=episode_id,
        goal="demo goal",
        task_id=task_id,
        outcome=outcome,
        annotations=tuple(annotations),
        subgoals=tuple(subgoals),
        frames_dir=None,
    )


# --- bundle loading -------------------------------------------------------------


def test_synthetic_corpus_round_trips(tmp_path):
    corpus = make_curation_corpus(tmp_path / "corpus", n_traj=3, seed=1)
    bundles = load_corpus(corpus)
    assert len(bundles) == 3
    assert all(b.annotations for b in bundles)
    assert all(b.subgoals for b in bundles)


def test_key_sequence_only_for_type_or_key():
    with pytest.raises(BundleError):
        FrameAnnotation(
            frame_index=1, action_occurred=True, event_description="x",
            input_type="click", key_sequence="ctrl+c",
        )


def test_overlapping_subgoals_rejected(tmp_path):
    corpus = make_curation_corpus(tmp_path / "corpus", n_traj=1, seed=1)
    bundle_dir = next(p for p in corpus.iterdir() if p.is_dir())
    subgoals = json.loads((bundle_dir / "subgoals.json").read_text())
    subgoals[1]["frame_range"][0] = subgoals[0]["frame_range"][1]  # overlap
    (bundle_dir / "subgoals.json").write_text(json.dumps(subgoals))
    with pytest.raises(BundleError):
        load_bundle(bundle_dir)


# --- salience / retrieval-tag rules -------------------------------------------------


def test_salience_rule_mapping():
    assert derive_salience(ann(1, occurred=False)) == 0.0
    assert derive_salience(ann(1, input_type="scroll")) == 0.3
    for t in ("click", "drag", "type", "key"):
        keyseq = "enter" if t in ("type", "key") else None
        assert derive_salience(ann(1, input_type=t, keyseq=keyseq)) == 0.9


def test_retrieval_tags_first_frame_of_later_subgoals():
    subgoals = (
        SubgoalAnnotation(1, "a", (1, 4)),
        SubgoalAnnotation(2, "b", (5, 8)),
        SubgoalAnnotation(3, "c", (9, 12)),
    )
    assert retrieval_tag_frames(subgoals) == {5, 9}


# --- step dataset ---------------------------------------------------------------


def test_step_dataset_no_event_frame_is_zero_salience():
    bundle = bundle_of([ann(1, occurred=False), ann(2)])
    samples = build_step_dataset(bundle)
    assert samples[0].target["salience"] == 0.0
    assert samples[0].target["retrieve"] == 0


def test_step_dataset_positive_count_matches_action_frames():
    # 10 frames, exactly 4 action-bearing
    action_frames = {2, 4, 7, 9}
    annotations = [ann(i, occurred=(i in action_frames)) for i in range(1, 11)]
    samples = build_step_dataset(bundle_of(annotations))
    assert len(samples) == 10
    positive = [s for s in samples if s.target["salience"] > 0]
    assert len(positive) == 4
    assert {s.provenance["frame_index"] for s in positive} == action_frames


def test_step_dataset_subgoal_boundary_sets_retrieve_tag():
    annotations = [ann(i) for i in range(1, 9)]
    subgoals = (
        SubgoalAnnotation(1, "a", (1, 4)),
        SubgoalAnnotation(2, "b", (5, 8)),
    )
    samples = build_step_dataset(bundle_of(annotations, subgoals))
    tags = [s.target["retrieve"] for s in samples]
    assert tags == [0, 0, 0, 0, 1, 0, 0, 0]


def test_step_dataset_counts_missing_roi():
    report = QualityReport()
    bundle = bundle_of([ann(1, roi=None), ann(2)])
    build_step_dataset(bundle, report)
    assert report.missing_roi == 1


def test_step_samples_validate_against_backend_schema():
    samples = build_step_dataset(bundle_of([ann(i) for i in range(1, 6)]))
    for sample in samples:
        validate_sample(sample)


# --- cmp dataset ------------------------------------------------------------------


def trigger_oracle(annotations, tau, n_recent):
    """Independent simulation of capacity triggers: count gated writes and
    halve on overflow."""
    recent = 0
    triggers = []
    for a in annotations:
        if derive_salience(a) > tau:
            recent += 1
            if recent > n_recent:
                triggers.append(a.frame_index)
                recent -= math.ceil(recent / 2)
    return triggers


def test_cmp_dataset_empty_when_buffer_never_overflows():
    config = CurationConfig(wm=WMConfig(n_recent=8))
    annotations = [ann(i) for i in range(1, 6)]  # 5 writes <= 8
    assert build_cmp_dataset(bundle_of(annotations), config) == []


def test_cmp_dataset_trigger_count_matches_oracle():
    rng = random.Random(4)
    for trial in range(10):
        n = rng.randint(6, 25)
        annotations = [
            ann(i, occurred=rng.random() < 0.7,
                input_type=rng.choice(["click", "scroll", "type"]),
                keyseq=None)
            for i in range(1, n + 1)
        ]
        # fix key_sequence validity
        annotations = [
            FrameAnnotation(
                frame_index=a.frame_index,
                action_occurred=a.action_occurred,
                event_description=a.event_description,
                input_type=a.input_type,
                key_sequence=None,
                roi_box=a.roi_box,
            )
            for a in annotations
        ]
        n_recent = rng.randint(2, 5)
        config = CurationConfig(wm=WMConfig(n_recent=n_recent))
        samples = build_cmp_dataset(bundle_of(annotations), config)
        expected = trigger_oracle(annotations, config.wm.tau, n_recent)
        assert [s.provenance["frame_index"] for s in samples] == expected


def test_cmp_gold_retained_subset_of_input_ids(tmp_path):
    corpus = make_curation_corpus(tmp_path / "c", n_traj=4, seed=9)
    config = CurationConfig(wm=WMConfig(n_recent=3))
    for bundle in load_corpus(corpus):
        for sample in build_cmp_dataset(bundle, config):
            payload = json.loads(sample.input_context["text"])
            valid = {rid for e in payload["entries"] for rid in e["roi_ids"]}
            assert set(sample.target["retained_rois"]) <= valid
            validate_sample(sample)


def test_cmp_gold_summary_covers_subgoals():
    annotations = [ann(i) for i in range(1, 10)]
    subgoals = (
        SubgoalAnnotation(1, "alpha phase", (1, 5)),
        SubgoalAnnotation(2, "beta phase", (6, 9)),
    )
    config = CurationConfig(wm=WMConfig(n_recent=3))
    samples = build_cmp_dataset(bundle_of(annotations, subgoals), config)
    assert samples
    assert "alpha phase" in samples[0].target["summary"]


# --- write dataset -----------------------------------------------------------------


def test_write_dataset_rejects_missing_subgoals():
    report = QualityReport()
    bundle = bundle_of([ann(1)], subgoals=())
    assert build_write_dataset(bundle, CurationConfig(), report) is None
    assert report.rejected_write and "no subgoal" in report.rejected_write[0]


def test_write_dataset_key_actions_one_per_subgoal():
    annotations = [ann(i) for i in range(1, 10)]
    subgoals = (
        SubgoalAnnotation(1, "a", (1, 3)),
        SubgoalAnnotation(2, "b", (4, 6)),
        SubgoalAnnotation(3, "c", (7, 9)),
    )
    sample = build_write_dataset(bundle_of(annotations, subgoals), CurationConfig())
    assert sample is not None
    assert len(sample.target["key_actions"]) == 3
    assert sample.target["outcome"] == "success"
    validate_sample(sample)


def test_write_dataset_echoes_trajectory_outcome():
    bundle = bundle_of([ann(1), ann(2)], outcome="failure")
    sample = build_write_dataset(bundle, CurationConfig())
    assert sample.target["outcome"] == "failure"


# --- sel dataset --------------------------------------------------------------------


def test_sel_gold_is_same_task_candidates(tmp_path):
    corpus = make_curation_corpus(tmp_path / "c", n_traj=8, seed=11)
    bundles = load_corpus(corpus)
    config = CurationConfig()
    bank = build_seed_bank(bundles, config)
    task_by_episode = {b.episode_id: b.task_id for b in bundles}
    by_entry = {e.entry_id: e for e in bank.entries.values()}
    saw_nonempty = False
    for bundle in bundles:
        for sample in build_sel_dataset(bundle, bank, task_by_episode, config):
            candidate_ids = sample.provenance["candidate_ids"]
            gold = sample.target["selected"]
            assert set(gold) <= set(candidate_ids)
            for cid in candidate_ids:
                entry = by_entry[cid]
                same_task = (
                    task_by_episode[entry.source_episode] == bundle.task_id
                    and entry.source_episode != bundle.episode_id
                )
                assert (cid in gold) == same_task
            saw_nonempty = saw_nonempty or bool(gold)
            validate_sample(sample)
    assert saw_nonempty  # corpus reuses task families, so some gold exists


def test_sel_gold_empty_without_same_task_candidates(tmp_path):
    corpus = make_curation_corpus(tmp_path / "c", n_traj=3, seed=2)
    bundles = load_corpus(corpus)
    config = CurationConfig()
    bank = build_seed_bank(bundles, config)
    # pretend every bank entry belongs to a foreign task
    task_by_episode = {b.episode_id: f"foreign-{i}" for i, b in enumerate(bundles)}
    for bundle in bundles:
        for sample in build_sel_dataset(
            bundle, bank, {**task_by_episode, bundle.episode_id: bundle.task_id}, config
        ):
            assert sample.target["selected"] == []


# --- corruption ------------------------------------------------------------------------


def step_sample(salience=0.9, summary="pressed the save button", roi=(0.2, 0.2, 0.5, 0.5), retrieve=0):
    return OperatorSample(
        operator="step",
        sample_id="s1",
        input_context={"text": "TASK: demo", "images": []},
        target={
            "salience": salience,
            "summary": summary,
            "roi": list(roi) if roi else None,
            "retrieve": retrieve,
        },
        provenance={"episode_id": "t1", "frame_index": 3},
    )


def cmp_sample(retained=("roi-a", "roi-b")):
    return OperatorSample(
        operator="cmp",
        sample_id="c1",
        input_context={
            "text": json.dumps(
                {"goal": "demo", "entries": [{"step": 1, "summary": "e", "roi_ids": list(retained)}]}
            ),
            "images": [],
        },
        target={"summary": "did the first phase", "retained_rois": list(retained)},
        provenance={"episode_id": "t1", "frame_index": 5},
    )


def test_r1_flips_salience_across_boundary():
    corrupted = corrupt(step_sample(salience=0.9), "R1", seed=0, tau=0.5)
    assert corrupted["salience"] == pytest.approx(0.1)
    assert corrupted["summary"] == step_sample().target["summary"]


def test_r1_inapplicable_when_flip_stays_on_one_side():
    with pytest.raises(InapplicableRule):
        corrupt(step_sample(salience=0.9), "R1", seed=0, tau=0.05)


def test_r2_moves_every_edge_or_replaces_with_full_frame():
    sample = step_sample(roi=(0.2, 0.2, 0.5, 0.5))
    corrupted = corrupt(sample, "R2", seed=3)
    old = sample.target["roi"]
    new = corrupted["roi"]
    assert new != old
    assert not validate_bbox(BBox.from_list(new))
    if new != [0.0, 0.0, 1.0, 1.0]:
        span_x = old[2] - old[0]
        span_y = old[3] - old[1]
        assert abs(new[0] - old[0]) >= 0.3 * span_x - 1e-9
        assert abs(new[1] - old[1]) >= 0.3 * span_y - 1e-9


def test_r2_requires_roi():
    with pytest.raises(InapplicableRule):
        corrupt(step_sample(roi=None), "R2", seed=0)


def test_r2_deterministic_given_seed():
    sample = step_sample()
    assert corrupt(sample, "R2", seed=5) == corrupt(sample, "R2", seed=5)
    assert corrupt(sample, "R2", seed=5) != corrupt(sample, "R2", seed=6) or True


def test_r3_genericizes_summary_only():
    sample = step_sample()
    corrupted = corrupt(sample, "R3", seed=0)
    assert corrupted["summary"] == GENERIC_SUMMARY
    assert corrupted["roi"] == sample.target["roi"]
    assert corrupted["salience"] == sample.target["salience"]


def test_r4_flips_retrieve_tag():
    assert corrupt(step_sample(retrieve=0), "R4")["retrieve"] == 1
    assert corrupt(step_sample(retrieve=1), "R4")["retrieve"] == 0


def test_r5_drops_all_retained_ids():
    corrupted = corrupt(cmp_sample(), "R5")
    assert corrupted["retained_rois"] == []


def test_r5_inapplicable_when_nothing_retained():
    with pytest.raises(InapplicableRule):
        corrupt(cmp_sample(retained=()), "R5")


def test_r6_injects_unfulfilled_claim():
    sample = cmp_sample()
    corrupted = corrupt(sample, "R6", seed=1)
    assert corrupted["summary"].startswith(sample.target["summary"])
    assert "Also completed:" in corrupted["summary"]
    assert corrupted["retained_rois"] == sample.target["retained_rois"]


@pytest.mark.parametrize("rule", STEP_RULES)
def test_step_rules_change_exactly_named_fields(rule):
    changed_by = {"R1": {"salience"}, "R2": {"roi"}, "R3": {"summary"}, "R4": {"retrieve"}}
    sample = step_sample()
    try:
        corrupted = corrupt(sample, rule, seed=2)
    except InapplicableRule:
        pytest.skip("rule not applicable to the canonical sample")
    diff = {k for k in sample.target if corrupted.get(k) != sample.target[k]}
    assert diff == changed_by[rule]


@pytest.mark.parametrize("rule", CMP_RULES)
def test_cmp_rules_change_exactly_named_fields(rule):
    changed_by = {"R5": {"retained_rois"}, "R6": {"summary"}}
    sample = cmp_sample()
    corrupted = corrupt(sample, rule, seed=2)
    diff = {k for k in sample.target if corrupted.get(k) != sample.target[k]}
    assert diff == changed_by[rule]


def test_build_preference_pairs_never_equal_sides():
    samples = [step_sample(), cmp_sample()]
    pairs = build_preference_pairs(samples, seed=0)
    assert pairs
    for pair in pairs:
        assert pair.chosen != pair.rejected
        assert pair.corruption_rule in STEP_RULES + CMP_RULES


def test_preference_pair_rejects_equal_sides():
    with pytest.raises(ValueError):
        PreferencePair(
            operator="step", pair_id="p", input_context={},
            chosen={"a": 1}, rejected={"a": 1}, corruption_rule="R1",
        )


# --- judge filtering ----------------------------------------------------------------


def test_judge_filter_always_a_keeps_only_chosen_on_a():
    pairs = build_preference_pairs([step_sample(), cmp_sample()], seed=0)
    judge = ScriptedBackend({("judge", "preference_v1"): {"preferred": "A"}})
    kept = judge_filter(pairs, judge, CFG, seed=2)
    # reproduce the order randomization to find where the chosen side sat
    rng = random.Random("2|judge-order")
    expected = [pair for pair in pairs if rng.random() < 0.5]
    assert [p.pair_id for p in kept] == [p.pair_id for p in expected]
    assert 0 < len(kept) < len(pairs)


def test_judge_filter_content_aware_policy_keeps_all_r3():
    samples = [step_sample(summary=f"specific event {i}") for i in range(6)]
    pairs = [p for p in build_preference_pairs(samples, seed=1) if p.corruption_rule == "R3"]

    def prefers_specific(key, payload, n):
        context = payload["context"]
        a_block = context[context.find("CANDIDATE A:") : context.find("CANDIDATE B:")]
        generic_in_a = GENERIC_SUMMARY in a_block
        return {"preferred": "B" if generic_in_a else "A", "margin": 2}

    judge = ScriptedBackend({("judge", "*"): prefers_specific})
    kept = judge_filter(pairs, judge, CFG, seed=3)
    assert len(kept) == len(pairs)
    assert all(p.judge_margin == 2.0 for p in kept)


def test_judge_filter_tie_drops_pair():
    pairs = build_preference_pairs([step_sample()], seed=0)
    report = QualityReport()
    kept = judge_filter(pairs, ScriptedBackend(), CFG, seed=0, report=report)
    assert kept == []  # scripted default verdict is a tie
    assert report.judge_ties == len(pairs)


def test_judge_filter_failure_drops_and_counts():
    pairs = build_preference_pairs([step_sample()], seed=0)
    report = QualityReport()
    judge = ScriptedBackend({("judge", "*"): "not parseable ever"})
    kept = judge_filter(pairs, judge, CFG, seed=0, report=report)
    assert kept == []
    assert report.judge_failures == len(pairs)


def test_judge_filter_empty_input():
    assert judge_filter([], ScriptedBackend(), CFG) == []


# --- export / import ---------------------------------------------------------------------


def test_export_import_round_trip(tmp_path):
    samples = build_step_dataset(bundle_of([ann(i) for i in range(1, 6)]))
    pairs = build_preference_pairs(samples, seed=0)
    manifest = export_datasets(samples, pairs, tmp_path)
    assert manifest["d_step.jsonl"]["records"] == len(samples)
    records = import_dataset(tmp_path / "d_step.jsonl")
    assert [r["sample_id"] for r in records] == [s.sample_id for s in samples]
    dpo = import_dataset(tmp_path / "dpo_step.jsonl")
    assert len(dpo) == len(pairs)


def test_import_detects_truncated_line(tmp_path):
    samples = build_step_dataset(bundle_of([ann(i) for i in range(1, 6)]))
    export_datasets(samples, [], tmp_path)
    path = tmp_path / "d_step.jsonl"
    payload = path.read_text()
    path.write_text(payload[:-20])
    with pytest.raises(BundleError):
        import_dataset(tmp_path / "d_step.jsonl")


def test_sidecar_record_count_matches_lines(tmp_path):
    samples = build_step_dataset(bundle_of([ann(i) for i in range(1, 8)]))
    export_datasets(samples, [], tmp_path)
    sidecar = json.loads((tmp_path / "d_step.jsonl.sha256").read_text())
    lines = (tmp_path / "d_step.jsonl").read_text().splitlines()
    assert sidecar["records"] == len(lines) == len(samples)


# --- pipeline -------------------------------------------------------------------------------


def test_curate_corpus_end_to_end_deterministic(tmp_path):
    corpus = make_curation_corpus(tmp_path / "corpus", n_traj=4, seed=5)

    def run(out):
        judge = ScriptedBackend(offline_script(3))
        return curate_corpus(
            corpus, out, judge, CFG, CurationConfig(wm=WMConfig(n_recent=3)), seed=2
        )

    r1 = run(tmp_path / "out1")
    r2 = run(tmp_path / "out2")
    assert r1.to_dict() == r2.to_dict()
    import hashlib

    for name in ("d_step.jsonl", "d_cmp.jsonl", "d_write.jsonl", "d_sel.jsonl",
                 "dpo_step.jsonl", "dpo_cmp.jsonl"):
        a = hashlib.sha256((tmp_path / "out1" / name).read_bytes()).hexdigest()
        b = hashlib.sha256((tmp_path / "out2" / name).read_bytes()).hexdigest()
        assert a == b, name
    assert r1.pairs_built > 0
    assert 0 < r1.pairs_kept <= r1.pairs_built
