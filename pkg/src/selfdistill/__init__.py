"""Self-training toolkit for face detection with an external detector plugin."""

from .boxes import BBox, Detection, GroundTruthBox, Keypoint, KeypointKind, Skeleton, area, iou
from .formats import AnnotationSet, DatasetManifest, DetectionSet, ImageRecord
from .metrics import MatchResult, MetricsConfig, MetricsReport, average_precision, average_recall, evaluate, match_at_threshold
from .orchestrator import IterationRecord, PipelineConfig, PipelineState, resume_pipeline, run_pipeline
from .protocol import PluginSession, TrainPayload
from .pseudolabel import FilterConfig, PseudoLabelStats, filter_top_detections

__version__ = "0.1.0"

__all__ = [
    "AnnotationSet",
    "BBox",
    "DatasetManifest",
    "Detection",
    "DetectionSet",
    "FilterConfig",
    "GroundTruthBox",
    "ImageRecord",
    "IterationRecord",
    "Keypoint",
    "KeypointKind",
    "MatchResult",
    "MetricsConfig",
    "MetricsReport",
    "PipelineConfig",
    "PipelineState",
    "PluginSession",
    "PseudoLabelStats",
    "Skeleton",
    "TrainPayload",
    "area",
    "average_precision",
    "average_recall",
    "evaluate",
    "filter_top_detections",
    "iou",
    "match_at_threshold",
    "resume_pipeline",
    "run_pipeline",
]
