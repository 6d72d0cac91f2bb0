"""The iterative self-training state machine.

Each iteration: infer over the unlabeled set, keep the best multiplier*N
detections as pseudo-labels, fine-tune the plugin for a fixed batch count, and
optionally evaluate on a held-out set. With relabel off, labels are generated
once by the initial model and every iteration retrains on that frozen file
(the ablation protocol); the iteration-1 file is copied byte-for-byte.

All state lives under the working directory and is updated after every step,
so an interrupted run resumes from the first incomplete iteration:

    workdir/
      state.json                   resumable pipeline state + config digest
      unlabeled_manifest.json      canonical copy of the training images
      eval_manifest.json           (when an eval set is supplied)
      eval_annotations.json
      baseline_eval_detections.json
      iter_<k>/detections.json     raw inference output of iteration k
      iter_<k>/pseudo_labels.json  filtered synthetic annotations
      iter_<k>/eval_detections.json

There is deliberately no early stopping: without human labels there is no
validation signal, so the loop always runs the configured iteration count and
only reports held-out metrics when an eval set is explicitly supplied.
Host-side steps are deterministic; inference seeds derive from (seed,
iteration), and held-out evaluation always uses one fixed seed so successive
iterations are compared under identical conditions.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import shutil
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from .errors import ContractViolationError, StateError
from .formats import (
    AnnotationSet,
    DatasetManifest,
    load_annotations,
    load_manifest,
    save_annotations,
    save_manifest,
)
from .metrics import MetricsConfig, MetricsReport, evaluate
from .protocol import PluginSession, TrainPayload
from .pseudolabel import FilterConfig, filter_top_detections, labeled_subset

log = logging.getLogger(__name__)

STATE_FILE = "state.json"
UNLABELED_FILE = "unlabeled_manifest.json"
EVAL_MANIFEST_FILE = "eval_manifest.json"
EVAL_ANNOTATIONS_FILE = "eval_annotations.json"

STATUS_RUNNING = "running"
STATUS_COMPLETED = "completed"
STATUS_FAILED = "failed"


@dataclass(frozen=True)
class PipelineConfig:
    iterations: int
    batches_before_relabel: int
    workdir: str
    filter: FilterConfig = field(default_factory=FilterConfig)
    relabel: bool = True
    eval_every_iteration: bool = False
    seed: int = 0
    score_floor: float = 0.0
    train_hyperparameters: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError(f"iterations must be >= 0, got {self.iterations}")
        if self.batches_before_relabel < 1:
            raise ValueError(f"batches_before_relabel must be >= 1, got {self.batches_before_relabel}")

    def to_json_dict(self) -> dict:
        return {
            "iterations": self.iterations,
            "batches_before_relabel": self.batches_before_relabel,
            "workdir": str(self.workdir),
            "filter": {
                "multiplier": self.filter.multiplier,
                "minimum_score": self.filter.minimum_score,
                "keep_unlabeled_images": self.filter.keep_unlabeled_images,
            },
            "relabel": self.relabel,
            "eval_every_iteration": self.eval_every_iteration,
            "seed": self.seed,
            "score_floor": self.score_floor,
            "train_hyperparameters": dict(self.train_hyperparameters),
        }

    @classmethod
    def from_json_dict(cls, doc: Mapping, workdir: str | None = None) -> "PipelineConfig":
        f = doc.get("filter", {})
        return cls(
            iterations=doc["iterations"],
            batches_before_relabel=doc["batches_before_relabel"],
            workdir=str(workdir if workdir is not None else doc["workdir"]),
            filter=FilterConfig(
                multiplier=f.get("multiplier", 2.0),
                minimum_score=f.get("minimum_score"),
                keep_unlabeled_images=f.get("keep_unlabeled_images", True),
            ),
            relabel=doc.get("relabel", True),
            eval_every_iteration=doc.get("eval_every_iteration", False),
            seed=doc.get("seed", 0),
            score_floor=doc.get("score_floor", 0.0),
            train_hyperparameters=doc.get("train_hyperparameters", {}),
        )

    def digest(self) -> str:
        """Hash of everything that shapes results; the workdir path is excluded."""
        doc = self.to_json_dict()
        doc.pop("workdir")
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()


@dataclass(frozen=True)
class IterationRecord:
    """Outcome of one infer->filter->train cycle; wall_time is diagnostic only."""

    index: int
    checkpoint_id: str
    n_pseudo_labels: int
    score_cutoff: float
    metrics: MetricsReport | None = None
    wall_time: float = field(default=0.0, compare=False)

    def to_json_dict(self) -> dict:
        return {
            "index": self.index,
            "checkpoint_id": self.checkpoint_id,
            "n_pseudo_labels": self.n_pseudo_labels,
            "score_cutoff": self.score_cutoff,
            "metrics": None if self.metrics is None else self.metrics.to_json_dict(),
            "wall_time": self.wall_time,
        }

    @classmethod
    def from_json_dict(cls, doc: Mapping) -> "IterationRecord":
        metrics = doc.get("metrics")
        return cls(
            index=doc["index"],
            checkpoint_id=doc["checkpoint_id"],
            n_pseudo_labels=doc["n_pseudo_labels"],
            score_cutoff=doc["score_cutoff"],
            metrics=None if metrics is None else MetricsReport.from_json_dict(metrics),
            wall_time=doc.get("wall_time", 0.0),
        )


@dataclass
class PipelineState:
    """Persisted, resumable snapshot of a pipeline run."""

    config: PipelineConfig
    config_digest: str
    status: str = STATUS_RUNNING
    current_checkpoint_id: str = ""
    completed: list[IterationRecord] = field(default_factory=list)
    baseline_metrics: MetricsReport | None = None
    plugin_command: list[str] = field(default_factory=list)
    metrics_config: MetricsConfig = field(default_factory=MetricsConfig)

    def to_json_dict(self) -> dict:
        return {
            "format_version": 1,
            "kind": "pipeline_state",
            "config": self.config.to_json_dict(),
            "config_digest": self.config_digest,
            "status": self.status,
            "current_checkpoint_id": self.current_checkpoint_id,
            "completed": [r.to_json_dict() for r in self.completed],
            "baseline_metrics": None
            if self.baseline_metrics is None
            else self.baseline_metrics.to_json_dict(),
            "plugin_command": list(self.plugin_command),
            "metrics_config": {
                "iou_thresholds": list(self.metrics_config.iou_thresholds),
                "recall_points": self.metrics_config.recall_points,
                "max_detections_per_image": self.metrics_config.max_detections_per_image,
            },
        }


def _state_path(workdir: str | Path) -> Path:
    return Path(workdir) / STATE_FILE


def save_state(state: PipelineState) -> None:
    """Atomic write; a crash never leaves a half-written state file."""
    path = _state_path(state.config.workdir)
    tmp = path.with_suffix(".json.tmp")
    tmp.write_text(json.dumps(state.to_json_dict(), indent=2) + "\n", encoding="utf-8")
    os.replace(tmp, path)


def load_state(workdir: str | Path) -> PipelineState:
    path = _state_path(workdir)
    if not path.exists():
        raise StateError(f"no state file at {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise StateError(f"cannot read state file {path}: {exc}") from exc
    try:
        config = PipelineConfig.from_json_dict(doc["config"], workdir=str(workdir))
        digest = doc["config_digest"]
        if config.digest() != digest:
            raise StateError(
                f"config digest mismatch in {path}: state was written for a different "
                "configuration (expected {0}, recorded {1})".format(config.digest(), digest)
            )
        status = doc["status"]
        if status not in (STATUS_RUNNING, STATUS_COMPLETED, STATUS_FAILED):
            raise StateError(f"unknown status {status!r} in {path}")
        completed = [IterationRecord.from_json_dict(r) for r in doc["completed"]]
        for i, record in enumerate(completed, start=1):
            if record.index != i:
                raise StateError(f"iteration records not contiguous in {path} (slot {i} holds {record.index})")
        mc = doc.get("metrics_config", {})
        baseline = doc.get("baseline_metrics")
        return PipelineState(
            config=config,
            config_digest=digest,
            status=status,
            current_checkpoint_id=doc.get("current_checkpoint_id", ""),
            completed=completed,
            baseline_metrics=None if baseline is None else MetricsReport.from_json_dict(baseline),
            plugin_command=list(doc.get("plugin_command", [])),
            metrics_config=MetricsConfig(
                iou_thresholds=tuple(mc["iou_thresholds"]),
                recall_points=mc["recall_points"],
                max_detections_per_image=mc["max_detections_per_image"],
            )
            if mc
            else MetricsConfig(),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise StateError(f"corrupt state file {path}: {exc}") from exc


def _stable_seed(*parts) -> int:
    # 48 bits: exactly representable as a JSON number in every ecosystem
    blob = repr(parts).encode()
    return int.from_bytes(hashlib.sha256(blob).digest()[:6], "big")


def _infer_seed(seed: int, iteration: int) -> int:
    return _stable_seed("infer", seed, iteration)


def _eval_seed(seed: int) -> int:
    # one fixed seed for every evaluation pass: iterations are compared
    # under identical held-out conditions
    return _stable_seed("eval", seed)


def _iter_dir(workdir: str | Path, index: int) -> Path:
    return Path(workdir) / f"iter_{index}"


def _run_iteration(
    state: PipelineState,
    plugin: PluginSession,
    unlabeled: DatasetManifest,
    eval_annotations: AnnotationSet | None,
    index: int,
) -> IterationRecord:
    config = state.config
    workdir = Path(config.workdir)
    iter_dir = _iter_dir(workdir, index)
    iter_dir.mkdir(parents=True, exist_ok=True)
    started = time.perf_counter()

    labels_path = iter_dir / "pseudo_labels.json"
    if config.relabel or index == 1:
        detections = plugin.infer(
            str(workdir / UNLABELED_FILE),
            str(iter_dir / "detections.json"),
            score_floor=config.score_floor,
            seed=_infer_seed(config.seed, index),
        )
        pseudo, stats = filter_top_detections(detections, unlabeled, config.filter, iteration=index)
        save_annotations(pseudo, labels_path)
        n_pseudo, cutoff = stats.n_selected, stats.score_cutoff
    else:
        # frozen-label mode: reuse iteration 1's labels byte-for-byte
        shutil.copyfile(_iter_dir(workdir, 1) / "pseudo_labels.json", labels_path)
        first = state.completed[0]
        n_pseudo, cutoff = first.n_pseudo_labels, first.score_cutoff

    if config.filter.keep_unlabeled_images:
        train_manifest_path = workdir / UNLABELED_FILE
        train_annotations_path = labels_path
    else:
        subset, subset_annotations = labeled_subset(unlabeled, load_annotations(labels_path))
        train_manifest_path = iter_dir / "train_manifest.json"
        train_annotations_path = iter_dir / "train_annotations.json"
        save_manifest(subset, train_manifest_path)
        save_annotations(subset_annotations, train_annotations_path)

    checkpoint_id = plugin.train(
        TrainPayload(
            annotations_path=str(train_annotations_path),
            manifest_path=str(train_manifest_path),
            num_batches=config.batches_before_relabel,
            hyperparameters=config.train_hyperparameters,
        )
    )

    metrics = None
    if eval_annotations is not None and config.eval_every_iteration:
        eval_detections = plugin.infer(
            str(workdir / EVAL_MANIFEST_FILE),
            str(iter_dir / "eval_detections.json"),
            seed=_eval_seed(config.seed),
        )
        metrics = evaluate(eval_detections, eval_annotations, state.metrics_config)

    record = IterationRecord(
        index=index,
        checkpoint_id=checkpoint_id,
        n_pseudo_labels=n_pseudo,
        score_cutoff=cutoff,
        metrics=metrics,
        wall_time=time.perf_counter() - started,
    )
    log.info(
        "iteration %d/%d: %d pseudo-labels (cutoff %.4f), checkpoint %s%s",
        index,
        config.iterations,
        n_pseudo,
        cutoff,
        checkpoint_id,
        "" if metrics is None else f", AP(0.5)={metrics.ap_at.get(0.5, float('nan')):.3f}",
    )
    return record


def _drive(
    state: PipelineState,
    plugin: PluginSession,
    unlabeled: DatasetManifest,
    eval_annotations: AnnotationSet | None,
    stop_after: int | None,
) -> list[IterationRecord]:
    config = state.config
    workdir = Path(config.workdir)
    try:
        if not state.current_checkpoint_id:
            state.current_checkpoint_id = plugin.save_checkpoint()
            save_state(state)
        if eval_annotations is not None and state.baseline_metrics is None:
            baseline_detections = plugin.infer(
                str(workdir / EVAL_MANIFEST_FILE),
                str(workdir / "baseline_eval_detections.json"),
                seed=_eval_seed(config.seed),
            )
            state.baseline_metrics = evaluate(baseline_detections, eval_annotations, state.metrics_config)
            save_state(state)
        for index in range(len(state.completed) + 1, config.iterations + 1):
            if stop_after is not None and index > stop_after:
                return list(state.completed)
            record = _run_iteration(state, plugin, unlabeled, eval_annotations, index)
            state.completed.append(record)
            state.current_checkpoint_id = record.checkpoint_id
            save_state(state)
        state.status = STATUS_COMPLETED
        save_state(state)
        return list(state.completed)
    except Exception:
        state.status = STATUS_FAILED
        save_state(state)
        raise


def run_pipeline(
    config: PipelineConfig,
    plugin: PluginSession,
    unlabeled: DatasetManifest,
    eval_set: tuple[DatasetManifest, AnnotationSet] | None = None,
    metrics_config: MetricsConfig | None = None,
    _stop_after: int | None = None,
) -> list[IterationRecord]:
    """Run the configured number of infer->filter->train iterations from scratch.

    The workdir must not already hold a pipeline state (use resume_pipeline for
    that). _stop_after is a test hook that abandons the run after the given
    iteration, exactly as if the process had died at that boundary.
    """
    if config.eval_every_iteration and eval_set is None:
        raise ContractViolationError("eval_every_iteration requires an eval_set")
    workdir = Path(config.workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    if _state_path(workdir).exists():
        raise StateError(
            f"{workdir} already contains {STATE_FILE}; use resume_pipeline or a fresh workdir"
        )

    save_manifest(unlabeled, workdir / UNLABELED_FILE)
    eval_annotations = None
    if eval_set is not None:
        eval_manifest, eval_annotations = eval_set
        save_manifest(eval_manifest, workdir / EVAL_MANIFEST_FILE)
        save_annotations(eval_annotations, workdir / EVAL_ANNOTATIONS_FILE)

    state = PipelineState(
        config=config,
        config_digest=config.digest(),
        plugin_command=list(plugin.command),
        metrics_config=metrics_config or MetricsConfig(),
    )
    save_state(state)
    return _drive(state, plugin, unlabeled, eval_annotations, _stop_after)


def resume_pipeline(
    workdir: str | Path, plugin: PluginSession | None = None
) -> list[IterationRecord]:
    """Continue an interrupted run; a completed run is a no-op.

    Without an explicit session the plugin command recorded in the state file
    is relaunched; the plugin is then restored to the last recorded checkpoint.
    """
    state = load_state(workdir)
    if state.status == STATUS_COMPLETED:
        return list(state.completed)
    state.status = STATUS_RUNNING

    unlabeled = load_manifest(Path(workdir) / UNLABELED_FILE)
    eval_annotations = None
    if (Path(workdir) / EVAL_ANNOTATIONS_FILE).exists():
        eval_manifest = load_manifest(Path(workdir) / EVAL_MANIFEST_FILE)
        eval_annotations = load_annotations(Path(workdir) / EVAL_ANNOTATIONS_FILE, manifest=eval_manifest)
    if state.config.eval_every_iteration and eval_annotations is None:
        raise StateError(f"{workdir} is missing its eval set but eval_every_iteration is on")

    own_session = plugin is None
    if own_session:
        if not state.plugin_command:
            raise StateError(f"state file in {workdir} records no plugin command to relaunch")
        plugin = PluginSession.open(state.plugin_command)
    try:
        if state.current_checkpoint_id:
            plugin.load_checkpoint(state.current_checkpoint_id)
        return _drive(state, plugin, unlabeled, eval_annotations, stop_after=None)
    finally:
        if own_session:
            plugin.__exit__(None, None, None)
