"""Pseudo-label filtering: keep the globally best multiplier*N detections.

For a dataset of N images the top floor(multiplier * N) detections by score
become synthetic annotations. The cut is global across the dataset, so images
may contribute any number of labels, including zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .boxes import GroundTruthBox
from .errors import ContractViolationError
from .formats import AnnotationSet, DatasetManifest, DetectionSet, PROVENANCE_PSEUDO


@dataclass(frozen=True)
class FilterConfig:
    multiplier: float = 2.0
    minimum_score: float | None = None
    #: When False, images left without any pseudo-label are dropped from the
    #: training manifest (see labeled_subset); by default they are kept as
    #: label-free background images.
    keep_unlabeled_images: bool = True

    def __post_init__(self):
        if self.multiplier <= 0:
            raise ValueError(f"multiplier must be > 0, got {self.multiplier}")
        if self.minimum_score is not None and not (0.0 <= self.minimum_score <= 1.0):
            raise ValueError(f"minimum_score must be in [0, 1], got {self.minimum_score}")


@dataclass(frozen=True)
class PseudoLabelStats:
    n_images: int
    n_input_detections: int
    n_selected: int
    score_cutoff: float  # score of the last selected detection; 0.0 if none selected

    def to_json_dict(self) -> dict:
        return {
            "n_images": self.n_images,
            "n_input_detections": self.n_input_detections,
            "n_selected": self.n_selected,
            "score_cutoff": self.score_cutoff,
        }


def filter_top_detections(
    detections: DetectionSet,
    manifest: DatasetManifest,
    config: FilterConfig | None = None,
    iteration: int = 1,
) -> tuple[AnnotationSet, PseudoLabelStats]:
    """Select the best floor(multiplier*N) detections as pseudo ground truth.

    Ties at the cutoff are broken by (score desc, image_id asc, input order);
    minimum_score, when set, prunes survivors after the count cut. Annotation
    ids are assigned 1..n in the canonical set order.
    """
    config = config or FilterConfig()
    n_images = len(manifest.images)
    if n_images == 0:
        raise ContractViolationError("filter_top_detections requires a nonempty manifest")

    dets = detections.detections
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, dets[i].image_id, i))
    budget = math.floor(config.multiplier * n_images)
    kept = order[:budget]
    if config.minimum_score is not None:
        kept = [i for i in kept if dets[i].score >= config.minimum_score]

    cutoff = dets[kept[-1]].score if kept else 0.0
    boxes = tuple(
        GroundTruthBox(dets[i].image_id, dets[i].box, annotation_id=rank + 1)
        for rank, i in enumerate(kept)
    )
    annotations = AnnotationSet(
        manifest_ref=detections.manifest_ref,
        boxes=boxes,
        provenance=PROVENANCE_PSEUDO,
        iteration=iteration,
    )
    stats = PseudoLabelStats(
        n_images=n_images,
        n_input_detections=len(dets),
        n_selected=len(kept),
        score_cutoff=cutoff,
    )
    return annotations, stats


def labeled_subset(
    manifest: DatasetManifest, annotations: AnnotationSet
) -> tuple[DatasetManifest, AnnotationSet]:
    """Restrict a manifest to images holding at least one annotation.

    Used when keep_unlabeled_images is off: the returned manifest gets a
    derived dataset_id and the annotation set is re-referenced to it.
    """
    labeled = {b.image_id for b in annotations.boxes}
    subset = DatasetManifest(
        dataset_id=f"{manifest.dataset_id}-labeled",
        images=tuple(rec for rec in manifest.images if rec.image_id in labeled),
    )
    return subset, AnnotationSet(
        manifest_ref=subset.dataset_id,
        boxes=annotations.boxes,
        provenance=annotations.provenance,
        iteration=annotations.iteration,
    )
