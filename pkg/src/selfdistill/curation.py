"""Build a training manifest by stratified selection on pose-estimation output.

Images are grouped by how many skeletons were found in them (1, 2, 3, four or
more), scored by the mean skeleton confidence, and the top per_bucket_quota
images of each stratum are kept. Images with no skeletons are excluded.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

from .boxes import Skeleton
from .errors import ContractViolationError
from .formats import DatasetManifest, validate_against_manifest


@dataclass(frozen=True)
class CurationConfig:
    per_bucket_quota: int = 5000
    #: Person-count strata; the last bucket is open-ended (">= buckets[-1]").
    buckets: tuple[int, ...] = (1, 2, 3, 4)

    def __post_init__(self):
        if self.per_bucket_quota < 1:
            raise ValueError(f"per_bucket_quota must be >= 1, got {self.per_bucket_quota}")
        if not self.buckets or list(self.buckets) != sorted(set(self.buckets)) or self.buckets[0] < 1:
            raise ValueError(f"buckets must be strictly increasing and start >= 1, got {self.buckets}")


def image_score(skeletons: Sequence[Skeleton]) -> tuple[int, float]:
    """(person count, mean skeleton score) for one image's skeletons."""
    if not skeletons:
        raise ContractViolationError("image_score requires a nonempty skeleton list")
    ids = {s.image_id for s in skeletons}
    if len(ids) > 1:
        raise ContractViolationError(f"image_score expects a single image, got {sorted(ids)}")
    return len(skeletons), sum(s.score for s in skeletons) / len(skeletons)


def _bucket_of(count: int, buckets: tuple[int, ...]) -> int | None:
    if count < buckets[0]:
        return None
    for b in reversed(buckets):
        if count >= b:
            return b
    return None


def curate(
    manifest: DatasetManifest,
    skeletons: Sequence[Skeleton],
    config: CurationConfig | None = None,
    exclude_ids: Iterable[str] = (),
) -> DatasetManifest:
    """Select the highest-confidence images per person-count stratum.

    Within a stratum, images are ranked by mean score descending (ties:
    image_id ascending) and the top per_bucket_quota survive. exclude_ids is a
    guard against test-set leakage; those images never appear in the output.
    """
    config = config or CurationConfig()
    validate_against_manifest((s.image_id for s in skeletons), manifest, "skeletons")
    excluded = set(exclude_ids)

    per_image: dict[str, list[Skeleton]] = {}
    for s in skeletons:
        if s.image_id in excluded:
            continue
        per_image.setdefault(s.image_id, []).append(s)

    strata: dict[int, list[tuple[float, str]]] = {b: [] for b in config.buckets}
    for image_id, group in per_image.items():
        count, mean_score = image_score(group)
        bucket = _bucket_of(count, config.buckets)
        if bucket is not None:
            strata[bucket].append((mean_score, image_id))

    selected: set[str] = set()
    for bucket in config.buckets:
        ranked = sorted(strata[bucket], key=lambda t: (-t[0], t[1]))
        selected.update(image_id for _, image_id in ranked[: config.per_bucket_quota])

    return DatasetManifest(
        dataset_id=f"{manifest.dataset_id}-curated",
        images=tuple(rec for rec in manifest.images if rec.image_id in selected),
    )
