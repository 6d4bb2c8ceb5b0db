"""
Tests for landmark scoring, NMS grouping and heatmap fusion.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from landmark_pipeline.augmentation import NoiseModel, detection_boxes, synth_predict
from landmark_pipeline.builder import LandmarkPipeline, create_pipeline
from landmark_pipeline.geometry import Box, box_from_landmarks, iou, map_points, original_frame, score_frame
from landmark_pipeline.heatmap import decode, encode, encode_stack, gaussian, states_from_flags
from landmark_pipeline.landmarks import N_LANDMARKS, RIGID_INDICES, LandmarkSet, canonical_face
from landmark_pipeline.pose import PoseAngles
from landmark_pipeline.scoring import (
    Detection,
    DetectionGroup,
    RefinementError,
    ScoredDetection,
    align_and_sum,
    face_score,
    landmark_score,
    landmark_scores,
    merge_detections,
    nms_group,
    normalize_stack,
    refine,
    score_detection,
)


def _scored(box: Box, score: float, index: int) -> ScoredDetection:
    det = Detection(box, 1.0, np.zeros((N_LANDMARKS, 64, 64)), "img", index)
    return ScoredDetection(
        detection=det,
        landmarks=LandmarkSet.from_points(canonical_face()),
        locations=np.zeros((N_LANDMARKS, 2)),
        lm_scores=np.zeros(N_LANDMARKS),
        face_score=score,
        refined_box=box,
    )


def _score_points(points, box):
    return map_points(points, original_frame(), score_frame(box))


# landmark_score / face_score

def test_landmark_score_ideal_is_zero():
    assert landmark_score(encode((20.3, 40.7)), (20.3, 40.7)) == pytest.approx(0.0, abs=1e-12)


def test_landmark_score_ignores_sign():
    assert landmark_score(encode((20.3, 40.7), "occluded"), (20.3, 40.7)) == pytest.approx(0.0, abs=1e-12)


def test_landmark_score_of_empty_map():
    ideal = gaussian(31.2, 12.9, 1.5)
    expected = -float((ideal ** 2).sum())
    assert landmark_score(np.zeros((64, 64)), (31.2, 12.9)) == pytest.approx(expected)
    # Roughly pi * sigma^2 for a blob away from the border.
    assert expected == pytest.approx(-np.pi * 1.5 ** 2, rel=1e-3)


def test_undetected_landmark_scored_at_grid_center():
    stack = np.zeros((N_LANDMARKS, 64, 64))
    locs = np.full((N_LANDMARKS, 2), np.nan)
    scores = landmark_scores(stack, locs)
    assert scores[0] == pytest.approx(landmark_score(np.zeros((64, 64)), (32.0, 32.0)))


def test_face_score_is_additive(face_points, detection_box):
    box = detection_box(face_points)
    locs = _score_points(face_points, box)
    stack = encode_stack(locs, states_from_flags(np.zeros(N_LANDMARKS)))
    assert face_score(stack, locs) == pytest.approx(0.0, abs=1e-9)

    stack[5] = 0.0
    assert face_score(stack, locs) == pytest.approx(landmark_score(np.zeros((64, 64)), locs[5]), abs=1e-9)


def test_noisy_stack_scores_below_zero(face_points, detection_box, rng):
    box = detection_box(face_points)
    locs = _score_points(face_points, box)
    for _ in range(20):
        stack = encode_stack(locs, states_from_flags(np.zeros(N_LANDMARKS)))
        stack += rng.normal(0.0, 0.05, stack.shape)
        assert face_score(stack, locs) < 0.0


# nms_group

def test_nms_empty_and_singleton():
    assert nms_group([]) == []
    groups = nms_group([_scored(Box(0, 0, 10, 10), -1.0, 0)])
    assert len(groups) == 1
    assert len(groups[0].members) == 1


def test_nms_identical_boxes_anchor_on_best_score():
    a = _scored(Box(0, 0, 10, 10), -5.0, 0)
    b = _scored(Box(0, 0, 10, 10), -1.0, 1)
    groups = nms_group([a, b])
    assert len(groups) == 1
    assert groups[0].anchor_member.index == 1
    assert len(groups[0].members) == 2


def test_nms_groups_overlapping_and_keeps_disjoint():
    a = _scored(Box(0, 0, 30, 30), -1.0, 0)
    b = _scored(Box(10, 0, 30, 30), -2.0, 1)
    c = _scored(Box(100, 100, 30, 30), -3.0, 2)
    groups = nms_group([c, b, a])
    assert [[m.index for m in g.members] for g in groups] == [[0, 1], [2]]


def test_nms_ties_broken_by_index():
    dets = [_scored(Box(0, 0, 10, 10), -1.0, i) for i in (3, 1, 2)]
    groups = nms_group(dets)
    assert groups[0].anchor_member.index == 1


detection_lists = st.lists(
    st.tuples(
        st.floats(0, 200), st.floats(0, 200), st.floats(5, 80), st.floats(5, 80),
        st.sampled_from([-3.0, -2.0, -1.0, -0.5]),
    ),
    max_size=12,
)


@settings(max_examples=60, deadline=None)
@given(detection_lists, st.floats(0.05, 0.9))
def test_nms_partitions_detections(specs, overlap):
    dets = [_scored(Box(x, y, w, h), s, i) for i, (x, y, w, h, s) in enumerate(specs)]
    groups = nms_group(dets, overlap)
    seen = sorted(m.index for g in groups for m in g.members)
    assert seen == list(range(len(dets)))

    anchors = [g.anchor_member for g in groups]
    assert [a.face_score for a in anchors] == sorted((a.face_score for a in anchors), reverse=True)
    for g in groups:
        for m in g.members:
            assert m.face_score <= g.anchor_member.face_score
    for k, a in enumerate(anchors):
        for b in anchors[k + 1:]:
            assert iou(a.refined_box, b.refined_box) < overlap


# align_and_sum / normalize_stack

def test_align_singleton_is_identity(face_points, make_detection):
    det = make_detection(face_points)
    group = nms_group([score_detection(det)])[0]
    np.testing.assert_allclose(align_and_sum(group), det.stack, atol=1e-3)


def test_align_identical_members_doubles(face_points, make_detection):
    det = make_detection(face_points)
    scored = score_detection(det)
    group = DetectionGroup(members=(scored, scored))
    np.testing.assert_allclose(align_and_sum(group), 2.0 * det.stack)


def test_align_shifted_member_moves_blob():
    anchor_box = Box(100.0, 100.0, 256.0, 256.0)
    member_box = Box(108.0, 100.0, 256.0, 256.0)
    anchor = _scored(anchor_box, -1.0, 0)
    stack = np.zeros((N_LANDMARKS, 64, 64))
    stack[0] = encode((32.5, 32.5))
    member = Detection(member_box, 1.0, stack, "img", 1)
    member_scored = ScoredDetection(member, anchor.landmarks, anchor.locations, anchor.lm_scores, -2.0, member_box)

    fused = align_and_sum(DetectionGroup(members=(anchor, member_scored)))
    found = decode(fused[0])
    # 8 original px at 256 px per 64 score px.
    assert found.location.x == pytest.approx(34.5, abs=1e-6)
    assert found.location.y == pytest.approx(32.5, abs=1e-6)


def test_align_empty_group_fails():
    with pytest.raises(RefinementError):
        align_and_sum(DetectionGroup(members=()))


def test_normalize_stack():
    s = np.zeros((2, 4, 4))
    s[0, 1, 1] = 2.0
    s[1, 2, 2] = -1.0
    np.testing.assert_allclose(normalize_stack(s), s / 2.0)

    unit = s / 2.0
    np.testing.assert_allclose(normalize_stack(unit), unit)

    s[1, 2, 2] = -3.0
    out = normalize_stack(s)
    assert out[1, 2, 2] == pytest.approx(-1.0)
    assert out[0, 1, 1] == pytest.approx(2.0 / 3.0)

    with pytest.raises(RefinementError):
        normalize_stack(np.zeros((2, 4, 4)))


@settings(max_examples=60, deadline=None)
@given(arrays(float, (3, 5, 5), elements=st.floats(-50, 50, allow_subnormal=False)))
def test_normalize_is_idempotent(s):
    if not np.abs(s).max() > 0:
        return
    once = normalize_stack(s)
    assert np.abs(once).max() == pytest.approx(1.0)
    np.testing.assert_allclose(normalize_stack(once), once)
    np.testing.assert_array_equal(np.sign(once), np.sign(s))


# refine

def test_refine_clean_detection(face_points, make_detection):
    group = nms_group([score_detection(make_detection(face_points))])[0]
    face = refine(group)
    assert not face.landmarks.occ_flag.any()
    assert face.landmarks.detected.all()
    assert face.n_members == 1

    expected = box_from_landmarks(face_points)
    got = face.box
    assert got.x == pytest.approx(expected.x, abs=1.0)
    assert got.y == pytest.approx(expected.y, abs=1.0)
    assert got.w == pytest.approx(expected.w, abs=1.0)
    assert got.h == pytest.approx(expected.h, abs=1.0)
    assert np.nanmax(np.abs(face.landmarks.points - face_points)) < 1.0


def test_refine_flags_negative_and_weak_landmarks(face_points, make_detection):
    flags = np.zeros(N_LANDMARKS, dtype=bool)
    flags[10] = True
    det = make_detection(face_points, occ_flag=flags)
    stack = det.stack.copy()
    stack[10] *= 0.8
    stack[20] *= 0.1
    det = Detection(det.box, det.det_score, stack, det.image_id, det.index)

    face = refine(nms_group([score_detection(det)])[0], occ_threshold=0.2)
    assert face.landmarks.occ_score[10] == pytest.approx(-0.8, abs=0.1)
    assert 0.0 < face.landmarks.occ_score[20] < 0.2
    assert set(np.flatnonzero(face.landmarks.occ_flag)) == {10, 20}


def test_refine_all_zero_group_fails(face_points, detection_box):
    det = Detection(detection_box(face_points), 1.0, np.zeros((N_LANDMARKS, 64, 64)))
    group = DetectionGroup(members=(_scored(det.box, -1.0, 0),))
    with pytest.raises(RefinementError):
        refine(group)


def test_pose_confidence_and_rigid_occlusion(face_points, make_detection):
    flags = np.zeros(N_LANDMARKS, dtype=bool)
    flags[30] = True
    face = refine(nms_group([score_detection(make_detection(face_points, occ_flag=flags))])[0])
    assert face.rigid_occluded()
    assert face.pose_confidence == pytest.approx(float(face.landmarks.lm_score[list(RIGID_INDICES)].min()))
    assert face.pose_confidence <= 0.0


def test_fusion_reduces_landmark_error(rng):
    noise = NoiseModel(pixel_noise_sigma=0.05, center_jitter_sigma=0.5)
    single_errors, fused_errors = [], []
    for _ in range(100):
        points = canonical_face((320.0, 240.0), rng.uniform(60.0, 100.0))
        dets = []
        for k, box in enumerate(detection_boxes(box_from_landmarks(points), 5, rng)):
            gt = LandmarkSet.from_points(_score_points(points, box), frame=score_frame(box))
            dets.append(Detection(box, 1.0, synth_predict(gt, noise, rng), "img", k))

        scored = [score_detection(d) for d in dets]
        for s in scored:
            single_errors.append(np.nanmean(np.linalg.norm(s.landmarks.points - points, axis=1)))

        faces = [refine(g) for g in nms_group(scored)]
        best = max(faces, key=lambda f: f.n_members)
        fused_errors.append(np.nanmean(np.linalg.norm(best.landmarks.points - points, axis=1)))

    assert np.mean(fused_errors) < np.mean(single_errors)


def test_merge_detections_reindexes(face_points, make_detection):
    a = [make_detection(face_points, index=7), make_detection(face_points, index=9)]
    b = [make_detection(face_points, index=0)]
    merged = merge_detections(a, b)
    assert [d.index for d in merged] == [0, 1, 2]
    assert merged[2].stack is b[0].stack


def test_pipeline_refines_one_image(face_points, make_detection):
    far = face_points + np.array([250.0, 0.0])
    dets = [
        make_detection(face_points, index=0),
        make_detection(face_points, index=1),
        make_detection(far, index=2),
    ]
    pipeline = LandmarkPipeline(occ_threshold=0.2, nms_overlap=0.2, sigma=1.5)
    results = pipeline.refine(dets, image_size=(640, 480))
    assert len(results) == 2
    assert results[0][0].face_score >= results[1][0].face_score
    assert sorted(face.n_members for face, _ in results) == [1, 2]
    for face, pose in results:
        assert pose is None or isinstance(pose, PoseAngles)
        assert not face.landmarks.occ_flag.any()


def test_pipeline_without_image_size_skips_pose(face_points, make_detection):
    results = LandmarkPipeline().refine([make_detection(face_points)])
    assert len(results) == 1
    assert results[0][1] is None


def test_create_pipeline_reads_environment(monkeypatch):
    monkeypatch.setenv("LANDMARK_OCC_THRESHOLD", "0.35")
    monkeypatch.setenv("LANDMARK_NMS_OVERLAP", "0.4")
    monkeypatch.delenv("LANDMARK_SIGMA", raising=False)
    pipeline = create_pipeline()
    assert (pipeline.occ_threshold, pipeline.nms_overlap, pipeline.sigma) == (0.35, 0.4, 1.5)
    assert create_pipeline(occ_threshold=0.1).occ_threshold == 0.1
