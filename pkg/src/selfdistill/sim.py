"""Deterministic synthetic world and detector for desk-scale pipeline testing.

There are no image files: each manifest entry encodes its scene (the true face
boxes) directly in the file_path as ``sim://v1/<base64url-json>``. Any
component holding a manifest can therefore reconstruct ground truth, which is
what lets one sim plugin serve both the unlabeled world and a held-out test
world.

The simulated detector has a "skill" (recall, localization noise, false
positive rate). Training on pseudo-labels measures their quality q -- the
fraction with IoU >= 0.5 against truth -- and moves every skill parameter
toward the operating point implied by q:

    step  = min(eta * num_batches, 1)
    recall += step * (q - recall)                     clamped to [0, 1]
    noise  += step * (6.0 * (1 - q) - noise)          px, floor 0
    fp     += step * (1.5 * (1 - q) - fp)             boxes/image, floor 0

High-quality labels sharpen the detector; poor labels (low q) actively degrade
it, so failure regimes are reachable in tests. All randomness is split into
per-image, per-face substreams keyed by (seed, image index), which makes runs
byte-reproducible and couples repeated inferences with the same seed: a
strictly better skill can only gain detections, never lose them.
"""

from __future__ import annotations

import argparse
import base64
import hashlib
import json
import logging
import math
import sys
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .boxes import BBox, Detection, GroundTruthBox, iou
from .errors import ContractViolationError, InfeasibleConfigError, SchemaError
from .formats import (
    AnnotationSet,
    DatasetManifest,
    DetectionSet,
    ImageRecord,
    load_annotations,
    load_manifest,
    save_detections,
)
from . import protocol

SCENE_PREFIX = "sim://v1/"

TRAIN_ETA = 1e-3
NOISE_TARGET_SCALE = 6.0  # px of jitter implied by label quality q: 6*(1-q)
FP_TARGET_SCALE = 1.5  # spurious boxes/image implied by q: 1.5*(1-q)

FP_SIZE_RANGE = (16.0, 48.0)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SimWorld:
    """Parameters of a synthetic dataset."""

    seed: int
    n_images: int
    faces_per_image: tuple[int, int] = (1, 4)
    image_size: tuple[float, float] = (640.0, 480.0)
    face_size: tuple[float, float] = (24.0, 40.0)

    def __post_init__(self):
        if self.n_images < 0:
            raise ValueError(f"n_images must be >= 0, got {self.n_images}")
        for name in ("faces_per_image", "face_size"):
            lo, hi = getattr(self, name)
            if lo > hi or lo < 0:
                raise ValueError(f"{name} range ({lo}, {hi}) is empty or negative")
        if self.image_size[0] <= 0 or self.image_size[1] <= 0:
            raise ValueError(f"image_size must be positive, got {self.image_size}")
        if self.face_size[0] <= 0:
            raise ValueError("face_size must be positive")


@dataclass(frozen=True)
class ScoreModel:
    """Maps a detection's IoU with truth to a confidence score."""

    base: float = 0.5
    iou_gain: float = 0.45
    jitter: float = 0.05
    fp_low: float = 0.05
    fp_high: float = 0.35

    def true_positive_score(self, overlap: float, unit_jitter: float) -> float:
        raw = self.base + self.iou_gain * overlap + self.jitter * (2.0 * unit_jitter - 1.0)
        return min(max(raw, 0.0), 1.0)

    def false_positive_score(self, unit: float) -> float:
        return self.fp_low + unit * (self.fp_high - self.fp_low)


@dataclass(frozen=True)
class SimSkill:
    """Detector competence: recall, localization jitter (px), FP rate (boxes/img)."""

    recall_base: float = 0.7
    localization_noise: float = 3.0
    false_positive_rate: float = 0.3
    score_model: ScoreModel = field(default_factory=ScoreModel)

    def __post_init__(self):
        if not (0.0 <= self.recall_base <= 1.0):
            raise ValueError(f"recall_base must be in [0, 1], got {self.recall_base}")
        if self.localization_noise < 0:
            raise ValueError(f"localization_noise must be >= 0, got {self.localization_noise}")
        if self.false_positive_rate < 0:
            raise ValueError(f"false_positive_rate must be >= 0, got {self.false_positive_rate}")

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


# ---------------------------------------------------------------------------
# Scenes


def encode_scene(faces: list[BBox]) -> str:
    payload = json.dumps({"faces": [list(b.as_xywh()) for b in faces]})
    return SCENE_PREFIX + base64.urlsafe_b64encode(payload.encode()).decode()


def decode_scene(file_path: str) -> list[BBox]:
    if not file_path.startswith(SCENE_PREFIX):
        raise SchemaError(f"{file_path!r} is not a sim-encoded image path")
    try:
        payload = json.loads(base64.urlsafe_b64decode(file_path[len(SCENE_PREFIX):]))
        return [BBox(*f) for f in payload["faces"]]
    except (ValueError, KeyError, TypeError) as exc:
        raise SchemaError(f"cannot decode scene from {file_path!r}: {exc}") from exc


def _world_dataset_id(world: SimWorld) -> str:
    blob = json.dumps(asdict(world), sort_keys=True).encode()
    return "sim-" + hashlib.sha256(blob).hexdigest()[:10]


def generate_world(world: SimWorld) -> tuple[DatasetManifest, AnnotationSet]:
    """Deterministically place faces in virtual images; returns manifest + truth."""
    width, height = world.image_size
    if world.face_size[1] > min(width, height):
        raise InfeasibleConfigError(
            f"faces up to {world.face_size[1]}px cannot fit a {width}x{height} image"
        )
    rng = np.random.default_rng(np.random.SeedSequence(world.seed & (2**64 - 1)))
    lo, hi = world.faces_per_image
    records = []
    boxes = []
    next_annotation = 1
    for i in range(world.n_images):
        image_id = f"sim{world.seed & 0xFFFFFFFF:08x}_{i:05d}"
        count = int(rng.integers(lo, hi + 1))
        faces = []
        for _ in range(count):
            size = float(rng.uniform(world.face_size[0], world.face_size[1]))
            x = float(rng.uniform(0.0, width - size))
            y = float(rng.uniform(0.0, height - size))
            faces.append(BBox(x, y, size, size))
        records.append(ImageRecord(image_id, encode_scene(faces), width, height))
        for f in faces:
            boxes.append(GroundTruthBox(image_id, f, next_annotation))
            next_annotation += 1
    manifest = DatasetManifest(dataset_id=_world_dataset_id(world), images=tuple(records))
    truth = AnnotationSet(manifest_ref=manifest.dataset_id, boxes=tuple(boxes))
    return manifest, truth


def truth_from_manifest(manifest: DatasetManifest) -> AnnotationSet:
    """Rebuild the ground truth encoded in a sim manifest's image paths."""
    boxes = []
    next_annotation = 1
    for rec in manifest.images:
        for f in decode_scene(rec.file_path):
            boxes.append(GroundTruthBox(rec.image_id, f, next_annotation))
            next_annotation += 1
    return AnnotationSet(manifest_ref=manifest.dataset_id, boxes=tuple(boxes))


# ---------------------------------------------------------------------------
# Inference


def _poisson_icdf(lam: float, u: float) -> int:
    """Smallest k with Poisson CDF(k) > u; monotone in lam for fixed u."""
    if lam <= 0.0:
        return 0
    p = math.exp(-lam)
    cdf = p
    k = 0
    while u >= cdf and k < 1000:
        k += 1
        p *= lam / k
        cdf += p
    return k


def sim_infer(manifest: DatasetManifest, skill: SimSkill, seed: int = 0) -> DetectionSet:
    """Emulate a detector pass over a sim manifest.

    Each true face is detected with probability recall_base, its corners
    jittered by up to localization_noise px; Poisson(false_positive_rate)
    spurious low-score boxes are added per image. Deterministic in
    (manifest, skill, seed); the per-image substreams are consumed in a fixed
    pattern so improving the skill never loses a detection under the same seed.
    """
    sm = skill.score_model
    detections = []
    for image_index, rec in enumerate(manifest.images):
        faces = decode_scene(rec.file_path)
        rng = np.random.default_rng(
            np.random.SeedSequence(seed & (2**64 - 1), spawn_key=(image_index,))
        )
        draws = rng.random((len(faces), 6))
        for face, row in zip(faces, draws):
            if row[0] >= skill.recall_base:
                continue
            n = skill.localization_noise
            j1, j2, j3, j4 = ((2.0 * row[k] - 1.0) * n for k in (1, 2, 3, 4))
            # jitter the left/top corner and the width/height deltas so a
            # zero-noise detector reproduces truth bit-exactly
            box = BBox(
                face.x + j1,
                face.y + j2,
                max(face.w + j3 - j1, 0.5),
                max(face.h + j4 - j2, 0.5),
            )
            score = sm.true_positive_score(iou(box, face), float(row[5]))
            detections.append(Detection(rec.image_id, box, score))
        count = _poisson_icdf(skill.false_positive_rate, float(rng.random()))
        for _ in range(count):
            ux, uy, usize, uscore = rng.random(4)
            size = FP_SIZE_RANGE[0] + float(usize) * (FP_SIZE_RANGE[1] - FP_SIZE_RANGE[0])
            size = min(size, rec.width, rec.height)
            x = float(ux) * max(rec.width - size, 0.0)
            y = float(uy) * max(rec.height - size, 0.0)
            detections.append(
                Detection(rec.image_id, BBox(x, y, size, size), sm.false_positive_score(float(uscore)))
            )
    return DetectionSet(
        manifest_ref=manifest.dataset_id,
        detections=tuple(detections),
        producer=f"sim-detector@{skill.digest()}",
    )


# ---------------------------------------------------------------------------
# Training


def pseudo_label_quality(pseudo_labels: AnnotationSet, truth: AnnotationSet) -> float:
    """Fraction of pseudo-labels overlapping some true box at IoU >= 0.5."""
    truth_by_image: dict[str, list[GroundTruthBox]] = {}
    for g in truth.boxes:
        truth_by_image.setdefault(g.image_id, []).append(g)
    if not pseudo_labels.boxes:
        return 0.0
    good = 0
    for b in pseudo_labels.boxes:
        candidates = truth_by_image.get(b.image_id, [])
        if candidates and max(iou(b.box, g.box) for g in candidates) >= 0.5:
            good += 1
    return good / len(pseudo_labels.boxes)


def sim_train(
    skill: SimSkill,
    pseudo_labels: AnnotationSet,
    truth: AnnotationSet,
    num_batches: int,
    eta: float = TRAIN_ETA,
) -> SimSkill:
    """Move the skill toward the operating point implied by label quality q."""
    if pseudo_labels.manifest_ref != truth.manifest_ref:
        raise ContractViolationError(
            f"pseudo-labels reference manifest {pseudo_labels.manifest_ref!r} but truth "
            f"references {truth.manifest_ref!r}"
        )
    if num_batches < 1:
        raise ContractViolationError(f"num_batches must be >= 1, got {num_batches}")
    q = pseudo_label_quality(pseudo_labels, truth)
    step = min(eta * num_batches, 1.0)
    recall = min(max(skill.recall_base + step * (q - skill.recall_base), 0.0), 1.0)
    noise = max(
        skill.localization_noise + step * (NOISE_TARGET_SCALE * (1.0 - q) - skill.localization_noise),
        0.0,
    )
    fp = max(
        skill.false_positive_rate + step * (FP_TARGET_SCALE * (1.0 - q) - skill.false_positive_rate),
        0.0,
    )
    return SimSkill(recall, noise, fp, skill.score_model)


# ---------------------------------------------------------------------------
# Plugin process


class SimPlugin:
    """Protocol-v1 detector plugin backed by sim_infer/sim_train.

    Checkpoints are content-addressed JSON files in state_dir, so identical
    skill states map to identical checkpoint ids across runs and resumes.
    """

    def __init__(self, skill: SimSkill, state_dir: str | Path):
        self.skill = skill
        self.state_dir = Path(state_dir)
        self.state_dir.mkdir(parents=True, exist_ok=True)

    def _persist(self) -> str:
        checkpoint_id = f"sim-{self.skill.digest()}"
        path = self.state_dir / f"{checkpoint_id}.json"
        if not path.exists():
            path.write_text(json.dumps(asdict(self.skill), sort_keys=True, indent=2) + "\n")
        return checkpoint_id

    def handle_infer(self, payload: dict) -> dict:
        manifest = load_manifest(payload["manifest_path"])
        seed = int(payload.get("seed", 0))
        floor = float(payload.get("score_floor", 0.0))
        detections = sim_infer(manifest, self.skill, seed)
        if floor > 0.0:
            detections = DetectionSet(
                manifest_ref=detections.manifest_ref,
                detections=tuple(d for d in detections.detections if d.score >= floor),
                producer=detections.producer,
            )
        save_detections(detections, payload["output_path"])
        return {"detections_path": payload["output_path"], "n_detections": len(detections)}

    def handle_train(self, payload: dict) -> dict:
        manifest = load_manifest(payload["manifest_path"])
        pseudo = load_annotations(payload["annotations_path"], manifest=manifest)
        truth = truth_from_manifest(manifest)
        hyper = payload.get("hyperparameters", {})
        eta = float(hyper.get("eta", TRAIN_ETA))
        self.skill = sim_train(self.skill, pseudo, truth, int(payload["num_batches"]), eta=eta)
        return {"checkpoint_id": self._persist()}

    def handle_save_checkpoint(self, payload: dict) -> dict:
        return {"checkpoint_id": self._persist()}

    def handle_load_checkpoint(self, payload: dict) -> dict:
        checkpoint_id = payload.get("checkpoint_id", "")
        path = self.state_dir / f"{checkpoint_id}.json"
        if not path.exists():
            raise SchemaError(f"unknown checkpoint {checkpoint_id!r}")
        doc = json.loads(path.read_text())
        self.skill = SimSkill(
            recall_base=doc["recall_base"],
            localization_noise=doc["localization_noise"],
            false_positive_rate=doc["false_positive_rate"],
            score_model=ScoreModel(**doc["score_model"]),
        )
        return {}

    def server(self) -> protocol.PluginServer:
        return protocol.PluginServer(
            name="sim-detector",
            handlers={
                "infer": self.handle_infer,
                "train": self.handle_train,
                "save_checkpoint": self.handle_save_checkpoint,
                "load_checkpoint": self.handle_load_checkpoint,
            },
        )


def serve(args: argparse.Namespace) -> int:
    """Entry point of the `simplugin` subcommand."""
    logging.basicConfig(stream=sys.stderr, level=protocol.plugin_log_level())
    skill = SimSkill(
        recall_base=args.recall_base,
        localization_noise=args.noise,
        false_positive_rate=args.fp_rate,
    )
    plugin = SimPlugin(skill, args.state_dir)
    plugin._persist()
    log.info("sim plugin up: %s", skill)
    return plugin.server().serve_forever()
