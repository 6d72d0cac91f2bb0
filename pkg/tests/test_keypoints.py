from fractions import Fraction

import pytest
from hypothesis import given, settings
import hypothesis.strategies as st

from selfdistill.boxes import Keypoint, KeypointKind, Skeleton
from selfdistill.errors import ReferentialError
from selfdistill.formats import DatasetManifest, ImageRecord
from selfdistill.keypoints import face_box_from_skeleton, face_boxes_from_skeleton_set

from .strategies import skeletons

FACE = (
    KeypointKind.NOSE,
    KeypointKind.LEFT_EYE,
    KeypointKind.RIGHT_EYE,
    KeypointKind.LEFT_EAR,
    KeypointKind.RIGHT_EAR,
)


def face_skeleton(points, image_id="img", score=0.8, confidence=0.9):
    kps = tuple(Keypoint(kind, x, y, confidence) for kind, (x, y) in zip(FACE, points))
    return Skeleton(image_id, kps, score)


def test_centering_five_coincident_keypoints():
    s = face_skeleton([(100, 100)] * 5)
    d = face_box_from_skeleton(s, box_size=30)
    assert d.box.as_xywh() == (85.0, 85.0, 30.0, 30.0)
    assert d.score == 0.8


def test_mean_of_spread_keypoints():
    # nose(10,10), eyes (8,8) (12,8), ears (6,9) (14,9) -> center (10, 8.8)
    s = face_skeleton([(10, 10), (8, 8), (12, 8), (6, 9), (14, 9)])
    d = face_box_from_skeleton(s, box_size=30)
    assert d.box.x == pytest.approx(-5.0, abs=1e-12)
    assert d.box.y == pytest.approx(-6.2, abs=1e-12)
    assert (d.box.w, d.box.h) == (30.0, 30.0)


def test_skeleton_without_face_keypoints_yields_none():
    s = Skeleton("img", (Keypoint(KeypointKind.OTHER, 5, 5, 0.9),), 0.5)
    assert face_box_from_skeleton(s) is None


def test_min_confidence_excludes_keypoints():
    kps = (
        Keypoint(KeypointKind.NOSE, 0, 0, 0.9),
        Keypoint(KeypointKind.LEFT_EYE, 100, 100, 0.2),
    )
    d = face_box_from_skeleton(Skeleton("img", kps, 0.5), box_size=10, min_confidence=0.5)
    assert d.box.as_xywh() == (-5.0, -5.0, 10.0, 10.0)


def test_bounds_translation_keeps_size():
    s = face_skeleton([(2, 2)] * 5)
    d = face_box_from_skeleton(s, box_size=30, image_bounds=(640, 480))
    assert d.box.as_xywh() == (0.0, 0.0, 30.0, 30.0)
    far = face_skeleton([(639, 479)] * 5)
    d = face_box_from_skeleton(far, box_size=30, image_bounds=(640, 480))
    assert d.box.as_xywh() == (610.0, 450.0, 30.0, 30.0)


def test_box_larger_than_frame_pins_to_origin():
    s = face_skeleton([(5, 5)] * 5)
    d = face_box_from_skeleton(s, box_size=50, image_bounds=(40, 40))
    assert d.box.as_xywh() == (0.0, 0.0, 50.0, 50.0)


def test_set_conversion_drops_faceless_and_passes_scores():
    faceless = Skeleton("img", (Keypoint(KeypointKind.OTHER, 1, 1, 0.9),), 0.25)
    with_face = [face_skeleton([(10, 10)] * 5, score=0.75), face_skeleton([(50, 50)] * 5, score=0.5)]
    out = face_boxes_from_skeleton_set([faceless] + with_face)
    assert len(out) == 2
    assert sorted(d.score for d in out.detections) == [0.5, 0.75]


def test_set_conversion_empty():
    out = face_boxes_from_skeleton_set([])
    assert len(out) == 0
    assert "box_size=30" in out.producer


def test_set_conversion_with_manifest_bounds_and_validation():
    manifest = DatasetManifest("d", (ImageRecord("img", "img.png", 60, 60),))
    s = face_skeleton([(1, 1)] * 5)
    out = face_boxes_from_skeleton_set([s], box_size=30, manifest=manifest)
    assert out.manifest_ref == "d"
    assert out.detections[0].box.as_xywh() == (0.0, 0.0, 30.0, 30.0)
    stranger = face_skeleton([(1, 1)] * 5, image_id="nope")
    with pytest.raises(ReferentialError):
        face_boxes_from_skeleton_set([stranger], manifest=manifest)


@given(skeletons(), st.floats(10, 60))
@settings(max_examples=60, deadline=None)
def test_output_box_exactly_square(skeleton, box_size):
    d = face_box_from_skeleton(skeleton, box_size=box_size)
    if d is not None:
        assert d.box.w == box_size
        assert d.box.h == box_size


@given(skeletons(min_keypoints=1), st.integers(-500, 500), st.integers(-500, 500))
@settings(max_examples=60, deadline=None)
def test_translation_equivariance(skeleton, dx, dy):
    moved = Skeleton(
        skeleton.image_id,
        tuple(Keypoint(k.kind, k.x + dx, k.y + dy, k.confidence) for k in skeleton.keypoints),
        skeleton.score,
    )
    base = face_box_from_skeleton(skeleton)
    shifted = face_box_from_skeleton(moved)
    assert (base is None) == (shifted is None)
    if base is not None:
        assert shifted.box.x == pytest.approx(base.box.x + dx, abs=1e-9)
        assert shifted.box.y == pytest.approx(base.box.y + dy, abs=1e-9)


@given(st.lists(skeletons(), max_size=8))
@settings(max_examples=40, deadline=None)
def test_output_count_bounded_by_input(batch):
    assert len(face_boxes_from_skeleton_set(batch)) <= len(batch)


@given(skeletons(min_keypoints=1))
@settings(max_examples=60, deadline=None)
def test_center_is_exact_mean(skeleton):
    d = face_box_from_skeleton(skeleton, box_size=30)
    face = skeleton.face_keypoints()
    if d is None:
        assert not face
        return
    cx = sum(Fraction(k.x) for k in face) / len(face)
    cy = sum(Fraction(k.y) for k in face) / len(face)
    assert d.box.x + 15 == pytest.approx(float(cx), abs=1e-9)
    assert d.box.y + 15 == pytest.approx(float(cy), abs=1e-9)
