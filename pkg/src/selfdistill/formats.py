"""COCO-style JSON persistence for manifests, annotations, detections and skeletons.

The on-disk dialect is documented field-by-field in docs/formats.md. Every file
carries ``"format_version": 1`` and a ``"kind"`` tag. Record containers
canonicalize their order at construction time, so serialization is
deterministic and round-trips are exact:

* manifests order images by image_id,
* annotation sets order boxes by (image_id, annotation_id),
* detection sets order records by (image_id, -score, bbox).

Unknown JSON fields are ignored on load. Loaders raise SchemaError naming the
offending record, and ReferentialError when a record points at an image_id
missing from the referenced manifest.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

from .boxes import BBox, Detection, GroundTruthBox, Keypoint, KeypointKind, FACE_KINDS, Skeleton
from .errors import ReferentialError, SchemaError

FORMAT_VERSION = 1

PROVENANCE_MANUAL = "manual"
PROVENANCE_PSEUDO = "pseudo"


@dataclass(frozen=True)
class ImageRecord:
    """One manifest entry: a virtual or real image with declared dimensions."""

    image_id: str
    file_path: str
    width: float
    height: float

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError(
                f"image dimensions must be positive, got {self.width}x{self.height}"
            )


@dataclass(frozen=True)
class DatasetManifest:
    """The persisted list of images defining a dataset split."""

    dataset_id: str
    images: tuple[ImageRecord, ...] = field(default_factory=tuple)

    def __post_init__(self):
        images = tuple(sorted(self.images, key=lambda r: r.image_id))
        seen: set[str] = set()
        for rec in images:
            if rec.image_id in seen:
                raise ValueError(f"duplicate image_id {rec.image_id!r} in manifest")
            seen.add(rec.image_id)
        object.__setattr__(self, "images", images)

    def image_ids(self) -> set[str]:
        return {rec.image_id for rec in self.images}

    def __len__(self) -> int:
        return len(self.images)


@dataclass(frozen=True)
class AnnotationSet:
    """Ground-truth or pseudo-label boxes over one manifest."""

    manifest_ref: str
    boxes: tuple[GroundTruthBox, ...] = field(default_factory=tuple)
    provenance: str = PROVENANCE_MANUAL
    iteration: int = 0

    def __post_init__(self):
        if self.provenance not in (PROVENANCE_MANUAL, PROVENANCE_PSEUDO):
            raise ValueError(f"provenance must be 'manual' or 'pseudo', got {self.provenance!r}")
        if self.iteration < 0:
            raise ValueError(f"iteration must be >= 0, got {self.iteration}")
        boxes = tuple(sorted(self.boxes, key=lambda b: (b.image_id, b.annotation_id)))
        seen: set[int] = set()
        for b in boxes:
            if b.annotation_id in seen:
                raise ValueError(f"duplicate annotation_id {b.annotation_id} in annotation set")
            seen.add(b.annotation_id)
        object.__setattr__(self, "boxes", boxes)

    def __len__(self) -> int:
        return len(self.boxes)


@dataclass(frozen=True)
class DetectionSet:
    """Scored detector output over one manifest."""

    manifest_ref: str
    detections: tuple[Detection, ...] = field(default_factory=tuple)
    producer: str = ""

    def __post_init__(self):
        dets = tuple(
            sorted(
                self.detections,
                key=lambda d: (d.image_id, -d.score, d.box.x, d.box.y, d.box.w, d.box.h),
            )
        )
        object.__setattr__(self, "detections", dets)

    def __len__(self) -> int:
        return len(self.detections)


def validate_against_manifest(
    image_ids: Iterable[str], manifest: DatasetManifest, what: str
) -> None:
    """Raise ReferentialError if any image_id is not in the manifest."""
    known = manifest.image_ids()
    for image_id in image_ids:
        if image_id not in known:
            raise ReferentialError(
                f"{what} references image_id {image_id!r} not present in manifest "
                f"{manifest.dataset_id!r}"
            )


# ---------------------------------------------------------------------------
# JSON plumbing


def _read_json(path: str | Path) -> Any:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise SchemaError(f"cannot read {path}: {exc}") from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: not valid JSON: {exc}") from exc


def _write_json(path: str | Path, obj: Any) -> None:
    data = json.dumps(obj, indent=2, ensure_ascii=False) + "\n"
    path = Path(path)
    if path.parent != Path(""):
        os.makedirs(path.parent, exist_ok=True)
    path.write_text(data, encoding="utf-8")


def _expect_document(doc: Any, kind: str, path: str | Path) -> dict:
    if not isinstance(doc, dict):
        raise SchemaError(f"{path}: top level must be a JSON object")
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise SchemaError(f"{path}: format_version must be {FORMAT_VERSION}, got {version!r}")
    if doc.get("kind") != kind:
        raise SchemaError(f"{path}: kind must be {kind!r}, got {doc.get('kind')!r}")
    return doc


def _get(record: dict, where: str, name: str, types: tuple[type, ...]) -> Any:
    if name not in record:
        raise SchemaError(f"{where}: missing required field {name!r}")
    value = record[name]
    if not isinstance(value, types) or isinstance(value, bool):
        raise SchemaError(f"{where}.{name}: expected {'/'.join(t.__name__ for t in types)}, got {value!r}")
    return value


def _parse_bbox(record: dict, where: str) -> BBox:
    raw = _get(record, where, "bbox", (list,))
    if len(raw) != 4 or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in raw):
        raise SchemaError(f"{where}.bbox: expected [x, y, w, h] numbers, got {raw!r}")
    x, y, w, h = (float(v) for v in raw)
    try:
        return BBox(x, y, w, h)
    except ValueError as exc:
        raise SchemaError(f"{where}.bbox: {exc}") from exc


# ---------------------------------------------------------------------------
# Manifests


def load_manifest(path: str | Path) -> DatasetManifest:
    doc = _expect_document(_read_json(path), "manifest", path)
    dataset_id = _get(doc, str(path), "dataset_id", (str,))
    raw_images = _get(doc, str(path), "images", (list,))
    images = []
    for i, rec in enumerate(raw_images):
        where = f"images[{i}]"
        if not isinstance(rec, dict):
            raise SchemaError(f"{where}: expected an object, got {rec!r}")
        image_id = _get(rec, where, "image_id", (str,))
        file_path = _get(rec, where, "file_path", (str,))
        width = _get(rec, where, "width", (int, float))
        height = _get(rec, where, "height", (int, float))
        try:
            images.append(ImageRecord(image_id, file_path, width, height))
        except ValueError as exc:
            raise SchemaError(f"{where}: {exc}") from exc
    try:
        return DatasetManifest(dataset_id=dataset_id, images=tuple(images))
    except ValueError as exc:
        raise SchemaError(f"{path}: {exc}") from exc


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    _write_json(
        path,
        {
            "format_version": FORMAT_VERSION,
            "kind": "manifest",
            "dataset_id": manifest.dataset_id,
            "images": [
                {
                    "image_id": rec.image_id,
                    "file_path": rec.file_path,
                    "width": rec.width,
                    "height": rec.height,
                }
                for rec in manifest.images
            ],
        },
    )


# ---------------------------------------------------------------------------
# Annotations


def load_annotations(path: str | Path, manifest: DatasetManifest | None = None) -> AnnotationSet:
    """Load an annotation set; validates referentially when a manifest is given."""
    doc = _expect_document(_read_json(path), "annotations", path)
    manifest_ref = _get(doc, str(path), "manifest_ref", (str,))
    provenance = _get(doc, str(path), "provenance", (str,))
    iteration = _get(doc, str(path), "iteration", (int,))
    raw = _get(doc, str(path), "annotations", (list,))
    boxes = []
    for i, rec in enumerate(raw):
        where = f"annotations[{i}]"
        if not isinstance(rec, dict):
            raise SchemaError(f"{where}: expected an object, got {rec!r}")
        annotation_id = _get(rec, where, "annotation_id", (int,))
        image_id = _get(rec, where, "image_id", (str,))
        boxes.append(GroundTruthBox(image_id, _parse_bbox(rec, where), annotation_id))
    try:
        out = AnnotationSet(
            manifest_ref=manifest_ref,
            boxes=tuple(boxes),
            provenance=provenance,
            iteration=iteration,
        )
    except ValueError as exc:
        raise SchemaError(f"{path}: {exc}") from exc
    if manifest is not None:
        if out.manifest_ref != manifest.dataset_id:
            raise ReferentialError(
                f"{path}: manifest_ref {out.manifest_ref!r} does not match manifest "
                f"{manifest.dataset_id!r}"
            )
        validate_against_manifest((b.image_id for b in out.boxes), manifest, str(path))
    return out


def save_annotations(annotations: AnnotationSet, path: str | Path) -> None:
    _write_json(
        path,
        {
            "format_version": FORMAT_VERSION,
            "kind": "annotations",
            "manifest_ref": annotations.manifest_ref,
            "provenance": annotations.provenance,
            "iteration": annotations.iteration,
            "annotations": [
                {
                    "annotation_id": b.annotation_id,
                    "image_id": b.image_id,
                    "bbox": list(b.box.as_xywh()),
                }
                for b in annotations.boxes
            ],
        },
    )


# ---------------------------------------------------------------------------
# Detections


def load_detections(path: str | Path, manifest: DatasetManifest | None = None) -> DetectionSet:
    """Load a detection set; validates referentially when a manifest is given."""
    doc = _expect_document(_read_json(path), "detections", path)
    manifest_ref = _get(doc, str(path), "manifest_ref", (str,))
    producer = _get(doc, str(path), "producer", (str,))
    raw = _get(doc, str(path), "detections", (list,))
    detections = []
    for i, rec in enumerate(raw):
        where = f"detections[{i}]"
        if not isinstance(rec, dict):
            raise SchemaError(f"{where}: expected an object, got {rec!r}")
        image_id = _get(rec, where, "image_id", (str,))
        score = _get(rec, where, "score", (int, float))
        box = _parse_bbox(rec, where)
        try:
            detections.append(Detection(image_id, box, float(score)))
        except ValueError as exc:
            raise SchemaError(f"{where}: {exc}") from exc
    out = DetectionSet(manifest_ref=manifest_ref, detections=tuple(detections), producer=producer)
    if manifest is not None:
        if out.manifest_ref != manifest.dataset_id:
            raise ReferentialError(
                f"{path}: manifest_ref {out.manifest_ref!r} does not match manifest "
                f"{manifest.dataset_id!r}"
            )
        validate_against_manifest((d.image_id for d in out.detections), manifest, str(path))
    return out


def save_detections(detections: DetectionSet, path: str | Path) -> None:
    _write_json(
        path,
        {
            "format_version": FORMAT_VERSION,
            "kind": "detections",
            "manifest_ref": detections.manifest_ref,
            "producer": detections.producer,
            "detections": [
                {
                    "image_id": d.image_id,
                    "bbox": list(d.box.as_xywh()),
                    "score": d.score,
                }
                for d in detections.detections
            ],
        },
    )


# ---------------------------------------------------------------------------
# Skeletons


def _kind_for_index(index: int) -> KeypointKind:
    return FACE_KINDS[index] if index < len(FACE_KINDS) else KeypointKind.OTHER


def load_skeletons(path: str | Path) -> list[Skeleton]:
    """Load pose-estimator output.

    ``keypoints`` is a flat [x, y, confidence, ...] array in COCO index order;
    indices 0-4 map to nose/left eye/right eye/left ear/right ear, the rest to
    ``other``.
    """
    doc = _expect_document(_read_json(path), "skeletons", path)
    raw = _get(doc, str(path), "skeletons", (list,))
    skeletons = []
    for i, rec in enumerate(raw):
        where = f"skeletons[{i}]"
        if not isinstance(rec, dict):
            raise SchemaError(f"{where}: expected an object, got {rec!r}")
        image_id = _get(rec, where, "image_id", (str,))
        score = _get(rec, where, "score", (int, float))
        flat = _get(rec, where, "keypoints", (list,))
        if len(flat) % 3 != 0:
            raise SchemaError(f"{where}.keypoints: length must be a multiple of 3, got {len(flat)}")
        keypoints = []
        for j in range(0, len(flat), 3):
            triple = flat[j : j + 3]
            if not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in triple):
                raise SchemaError(f"{where}.keypoints[{j // 3}]: expected numbers, got {triple!r}")
            x, y, conf = (float(v) for v in triple)
            try:
                keypoints.append(Keypoint(_kind_for_index(j // 3), x, y, conf))
            except ValueError as exc:
                raise SchemaError(f"{where}.keypoints[{j // 3}]: {exc}") from exc
        try:
            skeletons.append(Skeleton(image_id, tuple(keypoints), float(score)))
        except ValueError as exc:
            raise SchemaError(f"{where}: {exc}") from exc
    return skeletons


def save_skeletons(skeletons: Sequence[Skeleton], path: str | Path) -> None:
    """Write skeletons in list order (inputs are not canonicalized).

    Keypoint kinds are implied by position in the flat array, so each
    skeleton's keypoints must follow COCO index order; pad undetected slots
    with confidence-0 keypoints of the positional kind.
    """
    for i, s in enumerate(skeletons):
        for j, k in enumerate(s.keypoints):
            if k.kind is not _kind_for_index(j):
                raise SchemaError(
                    f"skeletons[{i}].keypoints[{j}]: kind {k.kind.value!r} cannot occupy "
                    f"COCO index {j} ({_kind_for_index(j).value!r}); the flat dialect is positional"
                )
    _write_json(
        path,
        {
            "format_version": FORMAT_VERSION,
            "kind": "skeletons",
            "skeletons": [
                {
                    "image_id": s.image_id,
                    "score": s.score,
                    "keypoints": [v for k in s.keypoints for v in (k.x, k.y, k.confidence)],
                }
                for s in skeletons
            ],
        },
    )
