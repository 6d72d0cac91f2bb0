import json
import sys

import pytest

from selfdistill.errors import ContractViolationError, StateError
from selfdistill.formats import load_annotations
from selfdistill.metrics import MetricsConfig
from selfdistill.orchestrator import (
    PipelineConfig,
    PipelineState,
    load_state,
    resume_pipeline,
    run_pipeline,
    save_state,
)
from selfdistill.protocol import PluginSession
from selfdistill.pseudolabel import FilterConfig
from selfdistill.sim import SimWorld, generate_world

TRAIN_WORLD = SimWorld(seed=501, n_images=60)
EVAL_WORLD = SimWorld(seed=502, n_images=40)


def sim_cmd(state_dir, recall=0.7, noise=2.0, fp=0.3):
    return [
        sys.executable, "-m", "selfdistill", "simplugin",
        "--state-dir", str(state_dir),
        "--recall-base", str(recall), "--noise", str(noise), "--fp-rate", str(fp),
    ]


def make_config(workdir, iterations=3, relabel=True, eval_every=False, seed=99, batches=300):
    # 300 batches is a fractional training step: the sim skill keeps moving
    # every iteration instead of saturating, so checkpoints stay distinct
    return PipelineConfig(
        iterations=iterations,
        batches_before_relabel=batches,
        workdir=str(workdir),
        filter=FilterConfig(multiplier=2.0),
        relabel=relabel,
        eval_every_iteration=eval_every,
        seed=seed,
    )


def run_fresh(workdir, state_dir, **kwargs):
    stop_after = kwargs.pop("stop_after", None)
    unlabeled, _ = generate_world(TRAIN_WORLD)
    eval_set = generate_world(EVAL_WORLD) if kwargs.get("eval_every") else None
    config = make_config(workdir, **kwargs)
    with PluginSession.open(sim_cmd(state_dir)) as session:
        return run_pipeline(config, session, unlabeled, eval_set=eval_set, _stop_after=stop_after)


def test_zero_iterations(tmp_path):
    records = run_fresh(tmp_path / "w", tmp_path / "s", iterations=0)
    assert records == []
    state = load_state(tmp_path / "w")
    assert state.status == "completed"
    assert state.current_checkpoint_id.startswith("sim-")


def test_full_run_artifacts_and_records(tmp_path):
    records = run_fresh(tmp_path / "w", tmp_path / "s", iterations=4)
    assert [r.index for r in records] == [1, 2, 3, 4]
    workdir = tmp_path / "w"
    assert len(list(workdir.glob("iter_*/detections.json"))) == 4
    assert len(list(workdir.glob("iter_*/pseudo_labels.json"))) == 4
    assert len({r.checkpoint_id for r in records}) == 4
    for k in (1, 2, 3, 4):
        labels = load_annotations(workdir / f"iter_{k}" / "pseudo_labels.json")
        assert labels.provenance == "pseudo"
        assert labels.iteration == k
    state = load_state(workdir)
    assert state.status == "completed"
    assert state.completed == records
    assert state.current_checkpoint_id == records[-1].checkpoint_id


def test_no_relabel_single_inference_pass(tmp_path):
    # a full-strength training step (eta * 1000 = 1) reaches the frozen-label
    # operating point in one iteration, so later checkpoints coincide exactly
    records = run_fresh(tmp_path / "w", tmp_path / "s", iterations=3, relabel=False, batches=1000)
    workdir = tmp_path / "w"
    assert [r.index for r in records] == [1, 2, 3]
    # exactly one inference over the unlabeled set
    assert len(list(workdir.glob("iter_*/detections.json"))) == 1
    # pseudo-label files frozen at iteration 1, byte for byte
    blobs = [
        (workdir / f"iter_{k}" / "pseudo_labels.json").read_bytes() for k in (1, 2, 3)
    ]
    assert blobs[0] == blobs[1] == blobs[2]
    # training converges onto the frozen-label operating point and stays there
    assert records[1].checkpoint_id == records[2].checkpoint_id


def test_two_scratch_runs_are_byte_identical(tmp_path):
    run_fresh(tmp_path / "w1", tmp_path / "s1", iterations=3)
    run_fresh(tmp_path / "w2", tmp_path / "s2", iterations=3)
    for k in (1, 2, 3):
        one = (tmp_path / "w1" / f"iter_{k}" / "pseudo_labels.json").read_bytes()
        two = (tmp_path / "w2" / f"iter_{k}" / "pseudo_labels.json").read_bytes()
        assert one == two
    assert load_state(tmp_path / "w1").completed == load_state(tmp_path / "w2").completed


def test_interrupted_run_resumes_to_identical_records(tmp_path):
    full = run_fresh(tmp_path / "full", tmp_path / "s1", iterations=4)

    partial = run_fresh(tmp_path / "cut", tmp_path / "s2", iterations=4, stop_after=2)
    assert len(partial) == 2
    state = load_state(tmp_path / "cut")
    assert state.status == "running"

    resumed = resume_pipeline(tmp_path / "cut")  # relaunches the recorded plugin command
    assert [r.index for r in resumed] == [1, 2, 3, 4]
    assert resumed == full
    assert load_state(tmp_path / "cut").status == "completed"
    for k in (1, 2, 3, 4):
        assert (tmp_path / "cut" / f"iter_{k}" / "pseudo_labels.json").read_bytes() == (
            tmp_path / "full" / f"iter_{k}" / "pseudo_labels.json"
        ).read_bytes()


def test_resume_completed_run_is_noop(tmp_path):
    records = run_fresh(tmp_path / "w", tmp_path / "s", iterations=2)
    again = resume_pipeline(tmp_path / "w")
    assert again == records


def test_resume_with_edited_config_fails_digest(tmp_path):
    run_fresh(tmp_path / "w", tmp_path / "s", iterations=2)
    state_path = tmp_path / "w" / "state.json"
    doc = json.loads(state_path.read_text())
    doc["config"]["iterations"] = 6
    state_path.write_text(json.dumps(doc))
    with pytest.raises(StateError, match="digest"):
        resume_pipeline(tmp_path / "w")


def test_fresh_run_refuses_dirty_workdir(tmp_path):
    run_fresh(tmp_path / "w", tmp_path / "s", iterations=1)
    unlabeled, _ = generate_world(TRAIN_WORLD)
    with PluginSession.open(sim_cmd(tmp_path / "s")) as session:
        with pytest.raises(StateError, match="fresh workdir"):
            run_pipeline(make_config(tmp_path / "w"), session, unlabeled)


def test_eval_every_iteration_requires_eval_set(tmp_path):
    unlabeled, _ = generate_world(TRAIN_WORLD)
    with PluginSession.open(sim_cmd(tmp_path / "s")) as session:
        with pytest.raises(ContractViolationError):
            run_pipeline(make_config(tmp_path / "w", eval_every=True), session, unlabeled)


def test_eval_metrics_recorded(tmp_path):
    records = run_fresh(tmp_path / "w", tmp_path / "s", iterations=2, eval_every=True)
    state = load_state(tmp_path / "w")
    assert state.baseline_metrics is not None
    assert all(r.metrics is not None for r in records)
    assert (tmp_path / "w" / "baseline_eval_detections.json").exists()
    assert (tmp_path / "w" / "iter_2" / "eval_detections.json").exists()


def test_state_round_trip(tmp_path):
    records = run_fresh(tmp_path / "w", tmp_path / "s", iterations=2, eval_every=True)
    state = load_state(tmp_path / "w")
    save_state(state)
    again = load_state(tmp_path / "w")
    assert again.completed == records
    assert again.config_digest == state.config_digest
    assert again.baseline_metrics == state.baseline_metrics
    assert again.metrics_config == state.metrics_config


def test_config_digest_ignores_workdir_but_not_substance(tmp_path):
    a = make_config(tmp_path / "a")
    b = make_config(tmp_path / "b")
    assert a.digest() == b.digest()
    assert a.digest() != make_config(tmp_path / "a", seed=1).digest()
    assert a.digest() != make_config(tmp_path / "a", relabel=False).digest()


def test_records_compare_without_wall_time(tmp_path):
    from selfdistill.orchestrator import IterationRecord

    one = IterationRecord(1, "ck", 10, 0.5, None, wall_time=1.0)
    two = IterationRecord(1, "ck", 10, 0.5, None, wall_time=9.9)
    assert one == two


def test_drop_unlabeled_images_trains_on_reduced_manifest(tmp_path):
    from selfdistill.formats import load_manifest

    unlabeled, _ = generate_world(TRAIN_WORLD)
    config = PipelineConfig(
        iterations=2,
        batches_before_relabel=300,
        workdir=str(tmp_path / "w"),
        filter=FilterConfig(multiplier=1.0, keep_unlabeled_images=False),
        seed=3,
        score_floor=0.1,
    )
    with PluginSession.open(sim_cmd(tmp_path / "s")) as session:
        records = run_pipeline(config, session, unlabeled)
    assert len(records) == 2
    for k in (1, 2):
        train_manifest = load_manifest(tmp_path / "w" / f"iter_{k}" / "train_manifest.json")
        labels = load_annotations(
            tmp_path / "w" / f"iter_{k}" / "train_annotations.json", manifest=train_manifest
        )
        # multiplier 1.0 on a 60-image world selects at most 60 labels over
        # at most 60 distinct images; images without a label were dropped
        assert train_manifest.image_ids() == {b.image_id for b in labels.boxes}
        assert len(train_manifest) < len(unlabeled)
