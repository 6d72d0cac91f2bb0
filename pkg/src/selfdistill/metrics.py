"""Detection evaluation: greedy IoU matching, AP and AR over an IoU threshold range.

The conventions follow the standard COCO protocol -- greedy score-ordered
one-to-one matching, 101-point interpolated average precision with a monotone
precision envelope, average recall with a per-image detection cap -- except
that the default threshold range is the looser 0.30:0.95 (step 0.05, 14
values) instead of 0.50:0.95.

Determinism: score ties are broken by (image_id ascending, input order), and
among equally overlapping ground-truth candidates the lowest annotation_id
wins. Per-image matching is independent across images, so evaluation order
never affects the result.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Mapping, Sequence

import numpy as np

from .boxes import Detection, GroundTruthBox, iou
from .errors import ContractViolationError
from .formats import AnnotationSet, DetectionSet


def default_iou_thresholds(
    start: float = 0.30, stop: float = 0.95, step: float = 0.05
) -> tuple[float, ...]:
    """Inclusive threshold ladder start, start+step, ..., stop.

    Built with exact decimal arithmetic so the defaults are the literal floats
    0.30, 0.35, ..., 0.95 with no accumulation error.
    """
    lo, hi, inc = (Fraction(str(v)) for v in (start, stop, step))
    count = int((hi - lo) / inc) + 1
    return tuple(float(lo + i * inc) for i in range(count))


@dataclass(frozen=True)
class MetricsConfig:
    iou_thresholds: tuple[float, ...] = field(default_factory=default_iou_thresholds)
    recall_points: int = 101
    max_detections_per_image: int = 100

    def __post_init__(self):
        object.__setattr__(self, "iou_thresholds", tuple(self.iou_thresholds))
        if not self.iou_thresholds:
            raise ValueError("iou_thresholds must not be empty")
        prev = 0.0
        for t in self.iou_thresholds:
            if not (0.0 < t <= 1.0):
                raise ValueError(f"IoU threshold {t} outside (0, 1]")
            if t <= prev:
                raise ValueError("iou_thresholds must be strictly increasing")
            prev = t
        if self.recall_points < 2:
            raise ValueError(f"recall_points must be >= 2, got {self.recall_points}")
        if self.max_detections_per_image < 1:
            raise ValueError("max_detections_per_image must be >= 1")


@dataclass(frozen=True)
class MatchResult:
    """One-to-one assignment of detections to ground truth for a single image."""

    pairs: tuple[tuple[int, int], ...]  # (detection index, annotation_id)
    unmatched_detections: tuple[int, ...]
    unmatched_ground_truth: tuple[int, ...]

    def __post_init__(self):
        det_indices = [p[0] for p in self.pairs] + list(self.unmatched_detections)
        ann_ids = [p[1] for p in self.pairs] + list(self.unmatched_ground_truth)
        if len(det_indices) != len(set(det_indices)) or len(ann_ids) != len(set(ann_ids)):
            raise ValueError("matching must be one-to-one")


@dataclass(frozen=True)
class MetricsReport:
    """AP/AR summary over a threshold range, shaped like a four-column results row."""

    ap_averaged: float
    ap_at: Mapping[float, float]
    ar_averaged: float
    iou_thresholds: tuple[float, ...]
    per_threshold_pr: Mapping[float, tuple[tuple[float, ...], tuple[float, ...]]] | None = None

    def __post_init__(self):
        values = [self.ap_averaged, self.ar_averaged, *self.ap_at.values()]
        for v in values:
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"metric value {v} outside [0, 1]")

    def range_label(self) -> str:
        lo, hi = self.iou_thresholds[0], self.iou_thresholds[-1]
        return f"{lo:g}:{hi:g}"

    def columns(self) -> dict[str, float]:
        """The four headline columns keyed by their textual names."""
        cols = {f"AP({self.range_label()})": self.ap_averaged}
        for t in (0.3, 0.5):
            if t in self.ap_at:
                cols[f"AP({t:g})"] = self.ap_at[t]
        cols[f"AR({self.range_label()})"] = self.ar_averaged
        return cols

    def to_json_dict(self) -> dict:
        # repr keys round-trip float thresholds exactly
        out = {
            "ap_averaged": self.ap_averaged,
            "ap_at": {repr(t): v for t, v in sorted(self.ap_at.items())},
            "ar_averaged": self.ar_averaged,
            "iou_thresholds": list(self.iou_thresholds),
        }
        if self.per_threshold_pr is not None:
            out["per_threshold_pr"] = {
                repr(t): {"precision": list(p), "recall": list(r)}
                for t, (p, r) in sorted(self.per_threshold_pr.items())
            }
        return out

    @classmethod
    def from_json_dict(cls, doc: Mapping) -> MetricsReport:
        pr = None
        if doc.get("per_threshold_pr") is not None:
            pr = {
                float(t): (tuple(c["precision"]), tuple(c["recall"]))
                for t, c in doc["per_threshold_pr"].items()
            }
        return cls(
            ap_averaged=float(doc["ap_averaged"]),
            ap_at={float(t): float(v) for t, v in doc["ap_at"].items()},
            ar_averaged=float(doc["ar_averaged"]),
            iou_thresholds=tuple(float(t) for t in doc["iou_thresholds"]),
            per_threshold_pr=pr,
        )


# ---------------------------------------------------------------------------
# Matching


def match_at_threshold(
    detections: Sequence[Detection],
    ground_truth: Sequence[GroundTruthBox],
    threshold: float,
) -> MatchResult:
    """Greedily match one image's detections to its ground truth at one threshold.

    Detections are processed by descending score (ties: input order); each takes
    the unmatched ground-truth box of highest IoU provided IoU >= threshold
    (ties: lowest annotation_id).
    """
    if not (0.0 < threshold <= 1.0):
        raise ContractViolationError(f"threshold {threshold} outside (0, 1]")
    image_ids = {d.image_id for d in detections} | {g.image_id for g in ground_truth}
    if len(image_ids) > 1:
        raise ContractViolationError(
            f"match_at_threshold expects records of a single image, got {sorted(image_ids)}"
        )

    order = sorted(range(len(detections)), key=lambda i: (-detections[i].score, i))
    open_gt = list(ground_truth)
    pairs = []
    unmatched_det = []
    for det_idx in order:
        det = detections[det_idx]
        best = None
        best_key = (-1.0, 0)
        for g in open_gt:
            overlap = iou(det.box, g.box)
            if overlap < threshold:
                continue
            key = (overlap, -g.annotation_id)
            if best is None or key > best_key:
                best, best_key = g, key
        if best is None:
            unmatched_det.append(det_idx)
        else:
            pairs.append((det_idx, best.annotation_id))
            open_gt.remove(best)
    return MatchResult(
        pairs=tuple(pairs),
        unmatched_detections=tuple(sorted(unmatched_det)),
        unmatched_ground_truth=tuple(sorted(g.annotation_id for g in open_gt)),
    )


def _check_same_manifest(detections: DetectionSet, ground_truth: AnnotationSet) -> None:
    if detections.manifest_ref != ground_truth.manifest_ref:
        raise ContractViolationError(
            f"detections reference manifest {detections.manifest_ref!r} but ground truth "
            f"references {ground_truth.manifest_ref!r}"
        )


def _group_by_image(records, key=lambda r: r.image_id):
    groups: dict[str, list] = {}
    for rec in records:
        groups.setdefault(key(rec), []).append(rec)
    return groups


def _true_positive_flags(
    detections: DetectionSet, ground_truth: AnnotationSet, threshold: float
) -> tuple[np.ndarray, int]:
    """TP flag per detection in global (-score, image_id, input order) order."""
    det_by_image = _group_by_image(enumerate(detections.detections), key=lambda t: t[1].image_id)
    gt_by_image = _group_by_image(ground_truth.boxes)

    matched: set[int] = set()  # global detection positions that matched
    for image_id, indexed in det_by_image.items():
        local = [d for _, d in indexed]
        result = match_at_threshold(local, gt_by_image.get(image_id, []), threshold)
        for local_idx, _ in result.pairs:
            matched.add(indexed[local_idx][0])

    order = sorted(
        range(len(detections.detections)),
        key=lambda i: (-detections.detections[i].score, detections.detections[i].image_id, i),
    )
    flags = np.array([i in matched for i in order], dtype=bool)
    return flags, len(ground_truth.boxes)


def _interpolated_ap(tp_flags: np.ndarray, n_gt: int, recall_points: int) -> float:
    tp = np.cumsum(tp_flags.astype(np.float64))
    ranks = np.arange(1, len(tp) + 1, dtype=np.float64)
    precision = tp / ranks
    recall = tp / n_gt
    # monotone envelope: precision at each point becomes the max to its right
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    grid = np.arange(recall_points, dtype=np.float64) / (recall_points - 1)
    idx = np.searchsorted(recall, grid, side="left")
    interp = np.where(idx < len(recall), envelope[np.minimum(idx, len(recall) - 1)], 0.0)
    return float(np.sum(interp) / recall_points)


def average_precision(
    detections: DetectionSet,
    ground_truth: AnnotationSet,
    threshold: float,
    config: MetricsConfig | None = None,
) -> float:
    """Interpolated AP at one IoU threshold.

    Empty ground truth is a degenerate case: AP is 1.0 with zero detections
    (vacuously perfect) and 0.0 otherwise. No per-image detection cap is
    applied here; the cap belongs to average recall.
    """
    config = config or MetricsConfig()
    _check_same_manifest(detections, ground_truth)
    if len(ground_truth.boxes) == 0:
        return 1.0 if len(detections.detections) == 0 else 0.0
    if len(detections.detections) == 0:
        return 0.0
    flags, n_gt = _true_positive_flags(detections, ground_truth, threshold)
    return _interpolated_ap(flags, n_gt, config.recall_points)


def _recall_at_threshold(
    detections: DetectionSet, ground_truth: AnnotationSet, threshold: float, max_dets: int
) -> float:
    det_by_image = _group_by_image(detections.detections)
    gt_by_image = _group_by_image(ground_truth.boxes)
    n_gt = len(ground_truth.boxes)
    matched = 0
    for image_id, gts in gt_by_image.items():
        dets = det_by_image.get(image_id, [])
        order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))[:max_dets]
        kept = [dets[i] for i in sorted(order)]
        matched += len(match_at_threshold(kept, gts, threshold).pairs)
    return matched / n_gt


def average_recall(
    detections: DetectionSet,
    ground_truth: AnnotationSet,
    config: MetricsConfig | None = None,
) -> float:
    """Mean over thresholds of recall with at most max_detections_per_image kept.

    The same empty-ground-truth rule as average_precision applies.
    """
    config = config or MetricsConfig()
    _check_same_manifest(detections, ground_truth)
    if len(ground_truth.boxes) == 0:
        return 1.0 if len(detections.detections) == 0 else 0.0
    if len(detections.detections) == 0:
        return 0.0
    recalls = [
        _recall_at_threshold(detections, ground_truth, t, config.max_detections_per_image)
        for t in config.iou_thresholds
    ]
    return float(sum(recalls) / len(recalls))


def evaluate(
    detections: DetectionSet,
    ground_truth: AnnotationSet,
    config: MetricsConfig | None = None,
    include_pr_curves: bool = False,
) -> MetricsReport:
    """Full report: AP averaged over the threshold range, AP at 0.3 and 0.5, AR."""
    config = config or MetricsConfig()
    _check_same_manifest(detections, ground_truth)

    ap_at = {t: average_precision(detections, ground_truth, t, config) for t in config.iou_thresholds}
    ap_averaged = float(sum(ap_at.values()) / len(ap_at))
    for extra in (0.3, 0.5):
        if extra not in ap_at:
            ap_at[extra] = average_precision(detections, ground_truth, extra, config)

    pr_curves = None
    if include_pr_curves:
        pr_curves = {}
        for t in config.iou_thresholds:
            if len(ground_truth.boxes) == 0 or len(detections.detections) == 0:
                pr_curves[t] = ((), ())
                continue
            flags, n_gt = _true_positive_flags(detections, ground_truth, t)
            tp = np.cumsum(flags.astype(np.float64))
            ranks = np.arange(1, len(tp) + 1, dtype=np.float64)
            pr_curves[t] = (tuple(tp / ranks), tuple(tp / n_gt))

    return MetricsReport(
        ap_averaged=ap_averaged,
        ap_at=ap_at,
        ar_averaged=average_recall(detections, ground_truth, config),
        iou_thresholds=config.iou_thresholds,
        per_threshold_pr=pr_curves,
    )
