"""Turn pose-estimator skeletons into fixed-size face boxes.

A face box is a box_size x box_size square centered at the mean position of
the skeleton's face keypoints (nose, eyes, ears) whose confidence exceeds
min_confidence. Skeletons without any qualifying face keypoint yield nothing.
"""

from __future__ import annotations

from typing import Sequence

from .boxes import BBox, Detection, Skeleton
from .formats import DatasetManifest, DetectionSet, validate_against_manifest


def _translate_into_bounds(x: float, size: float, extent: float) -> float:
    # Shift, never shrink; boxes larger than the frame get pinned to 0.
    return min(max(x, 0.0), max(extent - size, 0.0))


def face_box_from_skeleton(
    skeleton: Skeleton,
    box_size: float = 30.0,
    min_confidence: float = 0.0,
    image_bounds: tuple[float, float] | None = None,
) -> Detection | None:
    """Fixed-size box centered at the mean of qualifying face keypoints, or None.

    With image_bounds (width, height) the box is translated to lie inside the
    frame when possible; its size is never changed.
    """
    face = skeleton.face_keypoints(min_confidence)
    if not face:
        return None
    cx = sum(k.x for k in face) / len(face)
    cy = sum(k.y for k in face) / len(face)
    x = cx - box_size / 2.0
    y = cy - box_size / 2.0
    if image_bounds is not None:
        width, height = image_bounds
        x = _translate_into_bounds(x, box_size, width)
        y = _translate_into_bounds(y, box_size, height)
    return Detection(skeleton.image_id, BBox(x, y, box_size, box_size), skeleton.score)


def face_boxes_from_skeleton_set(
    skeletons: Sequence[Skeleton],
    box_size: float = 30.0,
    min_confidence: float = 0.0,
    image_bounds: tuple[float, float] | None = None,
    manifest: DatasetManifest | None = None,
) -> DetectionSet:
    """Convert each skeleton, dropping the ones without face keypoints.

    When a manifest is given, per-image bounds from it override image_bounds
    and the skeleton image_ids are validated against it.
    """
    if manifest is not None:
        validate_against_manifest((s.image_id for s in skeletons), manifest, "skeletons")
        dims = {rec.image_id: (rec.width, rec.height) for rec in manifest.images}
    detections = []
    for s in skeletons:
        bounds = dims[s.image_id] if manifest is not None else image_bounds
        det = face_box_from_skeleton(s, box_size, min_confidence, bounds)
        if det is not None:
            detections.append(det)
    return DetectionSet(
        manifest_ref=manifest.dataset_id if manifest is not None else "",
        detections=tuple(detections),
        producer=f"keypoint-face-boxes(box_size={box_size:g},min_confidence={min_confidence:g})",
    )
