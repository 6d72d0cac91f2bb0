"""Geometric primitives and detection/annotation records.

All boxes are axis-aligned, stored as (x, y, w, h) with continuous pixel
coordinates; the covered region is [x, x+w) x [y, y+h). Values are immutable
and safe to share between threads.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field


class KeypointKind(enum.Enum):
    NOSE = "nose"
    LEFT_EYE = "left_eye"
    RIGHT_EYE = "right_eye"
    LEFT_EAR = "left_ear"
    RIGHT_EAR = "right_ear"
    OTHER = "other"


#: COCO keypoint indices 0-4 are the five face landmarks, in this order.
FACE_KINDS = (
    KeypointKind.NOSE,
    KeypointKind.LEFT_EYE,
    KeypointKind.RIGHT_EYE,
    KeypointKind.LEFT_EAR,
    KeypointKind.RIGHT_EAR,
)


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box: left edge x, top edge y, width w, height h (pixels)."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        for name in ("x", "y", "w", "h"):
            v = getattr(self, name)
            if not math.isfinite(v):
                raise ValueError(f"BBox.{name} must be finite, got {v!r}")
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"BBox width/height must be positive, got w={self.w}, h={self.h}")

    def as_xywh(self) -> tuple[float, float, float, float]:
        return (self.x, self.y, self.w, self.h)

    def translated(self, dx: float, dy: float) -> BBox:
        return BBox(self.x + dx, self.y + dy, self.w, self.h)


@dataclass(frozen=True)
class Detection:
    """A scored box predicted by a detector for one image."""

    image_id: str
    box: BBox
    score: float

    def __post_init__(self):
        if not (0.0 <= self.score <= 1.0):
            raise ValueError(f"Detection.score must be in [0, 1], got {self.score!r}")


@dataclass(frozen=True)
class GroundTruthBox:
    """A reference annotation; annotation_id is unique within its set."""

    image_id: str
    box: BBox
    annotation_id: int


@dataclass(frozen=True)
class Keypoint:
    """A named 2D landmark with a confidence in [0, 1]."""

    kind: KeypointKind
    x: float
    y: float
    confidence: float

    def __post_init__(self):
        if not (0.0 <= self.confidence <= 1.0):
            raise ValueError(f"Keypoint.confidence must be in [0, 1], got {self.confidence!r}")


@dataclass(frozen=True)
class Skeleton:
    """A pose-estimator output: keypoints of one person plus an overall score."""

    image_id: str
    keypoints: tuple[Keypoint, ...] = field(default_factory=tuple)
    score: float = 0.0

    def __post_init__(self):
        if not (0.0 <= self.score <= 1.0):
            raise ValueError(f"Skeleton.score must be in [0, 1], got {self.score!r}")
        # Accept any iterable of keypoints but store an immutable tuple.
        if not isinstance(self.keypoints, tuple):
            object.__setattr__(self, "keypoints", tuple(self.keypoints))

    def face_keypoints(self, min_confidence: float = 0.0) -> tuple[Keypoint, ...]:
        """Face-kind keypoints with confidence strictly above min_confidence."""
        return tuple(
            k for k in self.keypoints if k.kind in FACE_KINDS and k.confidence > min_confidence
        )


def area(a: BBox) -> float:
    """Box area w*h."""
    return a.w * a.h


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union of two boxes; 0.0 when disjoint or merely touching."""
    ix = min(a.x + a.w, b.x + b.w) - max(a.x, b.x)
    if ix <= 0:
        return 0.0
    iy = min(a.y + a.h, b.y + b.h) - max(a.y, b.y)
    if iy <= 0:
        return 0.0
    inter = ix * iy
    return inter / (area(a) + area(b) - inter)
