"""
Command-line tests: every subcommand run through ``main`` on temporary files.
"""

import json

import numpy as np
import pandas as pd
import pytest

from app.main import build_parser, load_settings, main
from app.schemas import DetectionRecord, GroundTruthRecord, PoseRecord
from landmark_pipeline.landmarks import RIGID_INDICES, canonical_face
from landmark_pipeline.pose import CameraIntrinsics, camera_to_head, euler_to_rotation, project
from landmark_pipeline.utils import (
    read_heatmaps,
    read_jsonl,
    read_pts,
    write_heatmaps,
    write_image,
    write_jsonl,
    write_pts,
)


def run(*args) -> int:
    return main([str(a) for a in args])


@pytest.fixture
def pts_file(tmp_path, face_points):
    path = tmp_path / "face.pts"
    write_pts(path, face_points)
    return path


@pytest.fixture
def box_args(face_points, detection_box):
    box = detection_box(face_points)
    return ["--box", box.x, box.y, box.w, box.h]


@pytest.fixture
def synth_dir(tmp_path):
    out = tmp_path / "synth"
    assert run("synth", "-o", out, "--faces", 50, "--seed", 3) == 0
    return out


def test_encode_decode_round_trip(tmp_path, pts_file, box_args, face_points):
    ohm = tmp_path / "face.ohm"
    assert run("encode", pts_file, *box_args, "--occluded", 49, 50, "-o", ohm) == 0
    assert ohm.stat().st_size == 1_114_128

    out_json = tmp_path / "decoded.json"
    out_pts = tmp_path / "decoded.pts"
    assert run("decode", ohm, *box_args, "-o", out_json, "--pts-out", out_pts) == 0
    np.testing.assert_allclose(read_pts(out_pts), face_points, atol=1.0)

    record = DetectionRecord.model_validate_json(out_json.read_text())
    assert [i for i, f in enumerate(record.occ_flags) if f] == [48, 49]


def test_refine_clean_detection(tmp_path, pts_file, box_args):
    (tmp_path / "maps").mkdir()
    assert run("encode", pts_file, *box_args, "-o", tmp_path / "maps" / "face.ohm") == 0
    box = [float(v) for v in box_args[1:]]
    write_jsonl(tmp_path / "dets.jsonl", [
        DetectionRecord(image_id="face", box=box, det_score=0.9, heatmaps="maps/face.ohm", image_size=(640, 480)),
    ])

    refined = tmp_path / "refined.jsonl"
    assert run("refine", tmp_path / "dets.jsonl", "-o", refined) == 0
    records = read_jsonl(refined, DetectionRecord)
    assert len(records) == 1
    assert not any(records[0].occ_flags)
    assert records[0].members == 1
    assert records[0].det_score == pytest.approx(0.9)
    assert all(p is not None for p in records[0].landmarks)


def test_refine_merges_detector_outputs(tmp_path, pts_file, box_args):
    (tmp_path / "maps").mkdir()
    assert run("encode", pts_file, *box_args, "-o", tmp_path / "maps" / "face.ohm") == 0
    box = [float(v) for v in box_args[1:]]
    for name in ("a.jsonl", "b.jsonl"):
        write_jsonl(tmp_path / name, [DetectionRecord(image_id="face", box=box, heatmaps="maps/face.ohm")])

    refined = tmp_path / "refined.jsonl"
    assert run("refine", tmp_path / "a.jsonl", tmp_path / "b.jsonl", "-o", refined) == 0
    records = read_jsonl(refined, DetectionRecord)
    assert len(records) == 1
    assert records[0].members == 2


def test_synth_refine_eval_occ(tmp_path, synth_dir):
    gt = read_jsonl(synth_dir / "gt.jsonl", GroundTruthRecord)
    assert len(gt) == 50
    assert any(any(r.occ_flags) for r in gt)

    refined = tmp_path / "refined.jsonl"
    assert run("refine", synth_dir / "detections.jsonl", "-o", refined) == 0

    csv = tmp_path / "occ.csv"
    assert run("eval-occ", refined, synth_dir / "gt.jsonl", "--thresholds", 0.0, 0.2, "-o", csv) == 0
    frame = pd.read_csv(csv)
    at_zero = frame[frame["threshold"] == 0.0].iloc[0]
    at_default = frame[frame["threshold"] == 0.2].iloc[0]
    assert at_zero["precision"] == 1.0
    assert at_zero["recall"] == 1.0
    assert at_default["recall"] >= at_zero["recall"]


def test_synth_is_deterministic(tmp_path, synth_dir):
    again = tmp_path / "again"
    assert run("synth", "-o", again, "--faces", 50, "--seed", 3) == 0
    assert (again / "detections.jsonl").read_bytes() == (synth_dir / "detections.jsonl").read_bytes()
    assert (again / "gt.jsonl").read_bytes() == (synth_dir / "gt.jsonl").read_bytes()
    for ohm in sorted((synth_dir / "heatmaps").glob("*.ohm"))[:5]:
        assert (again / "heatmaps" / ohm.name).read_bytes() == ohm.read_bytes()


def test_synth_from_pts_with_noise(tmp_path, pts_file):
    out = tmp_path / "noisy"
    assert run(
        "synth", pts_file, "-o", out, "--detections-per-face", 3,
        "--pixel-noise", 0.05, "--center-jitter", 0.25, "--occlusion-rate", 0.0,
    ) == 0
    dets = read_jsonl(out / "detections.jsonl", DetectionRecord)
    assert [d.heatmaps for d in dets] == [f"heatmaps/face_{k}.ohm" for k in range(3)]
    assert read_heatmaps(out / dets[0].heatmaps).shape == (68, 64, 64)
    assert not any(read_jsonl(out / "gt.jsonl", GroundTruthRecord)[0].occ_flags)


def test_parallel_refine_keeps_order(tmp_path):
    synth = tmp_path / "synth"
    assert run("synth", "-o", synth, "--faces", 6, "--detections-per-face", 2, "--seed", 5) == 0
    serial, parallel = tmp_path / "serial.jsonl", tmp_path / "parallel.jsonl"
    assert run("refine", synth / "detections.jsonl", "-o", serial) == 0
    assert run("refine", synth / "detections.jsonl", "-o", parallel, "--jobs", 2) == 0
    assert serial.read_bytes() == parallel.read_bytes()


def test_eval_det_on_synthetic_set(tmp_path, synth_dir):
    refined = tmp_path / "refined.jsonl"
    assert run("refine", synth_dir / "detections.jsonl", "-o", refined) == 0
    csv = tmp_path / "det.csv"
    assert run("eval-det", refined, synth_dir / "gt.jsonl", "-o", csv) == 0
    frame = pd.read_csv(csv)
    assert (frame["precision"] == 1.0).all()
    assert frame["recall"].iloc[-1] == 1.0


def test_eval_yaw(tmp_path, face_points):
    box = [240.0, 150.0, 160.0, 160.0]
    landmarks = [tuple(p) for p in face_points]
    write_jsonl(tmp_path / "refined.jsonl", [
        DetectionRecord(image_id="a", box=box, face_score=-1.0, pose=PoseRecord(yaw=12.0, pitch=0.0, roll=0.0)),
        DetectionRecord(image_id="b", box=box, face_score=-1.0, pose=PoseRecord(yaw=40.0, pitch=0.0, roll=0.0)),
    ])
    write_jsonl(tmp_path / "gt.jsonl", [
        GroundTruthRecord(image_id="a", landmarks=landmarks, box=box, yaw=10.0),
        GroundTruthRecord(image_id="b", landmarks=landmarks, box=box, yaw=10.0),
    ])
    csv = tmp_path / "yaw.csv"
    assert run("eval-yaw", tmp_path / "refined.jsonl", tmp_path / "gt.jsonl", "-o", csv) == 0
    row = pd.read_csv(csv).iloc[0]
    assert row["detection_rate"] == 1.0
    assert row["success_rate"] == 0.5
    assert row["mean_abs_err"] == pytest.approx(16.0)


def test_pose_from_pts(tmp_path, face_model):
    cam = CameraIntrinsics.for_image(640, 480)
    rotation = camera_to_head(euler_to_rotation(20.0, 5.0, 0.0))
    points = canonical_face((320.0, 240.0), 80.0)
    points[list(RIGID_INDICES)] = project(face_model, rotation, np.array([0.0, 0.0, 800.0]), cam)
    path = tmp_path / "posed.pts"
    write_pts(path, points)

    out = tmp_path / "pose.json"
    assert run("pose", path, "--image-size", 640, 480, "-o", out) == 0
    pose = json.loads(out.read_text())
    assert pose["yaw"] == pytest.approx(20.0, abs=0.5)
    assert pose["pitch"] == pytest.approx(5.0, abs=0.5)

    assert run("pose", path) == 1


def test_features_from_pts_sequence(tmp_path, face_points):
    paths = []
    for k in range(3):
        pts = face_points.copy()
        pts[[37, 38, 43, 44]] -= [0.0, k]
        path = tmp_path / f"frame{k}.pts"
        write_pts(path, pts)
        paths.append(path)
    csv = tmp_path / "features.csv"
    assert run("features", *paths, "-o", csv) == 0
    frame = pd.read_csv(csv)
    assert len(frame) == 3
    assert frame["left_eye_norm"].tolist() == [0.0, 0.5, 1.0]


def test_augment_writes_samples(tmp_path, face_points):
    img = np.random.default_rng(0).integers(0, 255, (480, 640, 3), dtype=np.uint8)
    write_image(tmp_path / "photo.png", img)
    write_pts(tmp_path / "photo.pts", face_points)

    out = tmp_path / "train"
    assert run("augment", tmp_path / "photo.png", "-o", out, "--pos-per-face", 3, "--neg-per-image", 2) == 0
    lines = (out / "samples.jsonl").read_text().splitlines()
    assert len(lines) == 5
    first = json.loads(lines[0])
    assert first["positive"] is True
    assert (out / first["image"]).exists()
    assert read_heatmaps(out / first["labels"]).shape == (68, 64, 64)


def test_error_line_and_exit_code(tmp_path, capsys, box_args):
    assert run("decode", tmp_path / "missing.ohm", *box_args) == 1
    err = capsys.readouterr().err.strip().splitlines()
    assert err[-1].startswith("error: FileNotFoundError:")

    bad = tmp_path / "bad.pts"
    bad.write_text("version: 1\nn_points: 29\n{\n}\n")
    assert run("encode", bad, *box_args, "-o", tmp_path / "x.ohm") == 1
    err = capsys.readouterr().err.strip().splitlines()
    assert err[-1].startswith("error: FormatError:")
    assert "bad.pts:2:" in err[-1]


def test_unknown_flag_is_a_usage_error():
    assert run("decode", "x.ohm", "--no-such-flag") == 2


def test_settings_precedence(tmp_path, monkeypatch):
    monkeypatch.setenv("LANDMARK_OCC_THRESHOLD", "0.3")
    monkeypatch.setenv("LANDMARK_SIGMA", "2.0")
    config = tmp_path / "settings.toml"
    config.write_text("occ_threshold = 0.5\nnms_overlap = 0.4\n")
    parser = build_parser()

    settings = load_settings(parser.parse_args(["eval-occ", "r", "g"]))
    assert (settings.occ_threshold, settings.sigma) == (0.3, 2.0)

    settings = load_settings(parser.parse_args(["eval-occ", "r", "g", "--config", str(config)]))
    assert (settings.occ_threshold, settings.nms_overlap, settings.sigma) == (0.5, 0.4, 2.0)

    settings = load_settings(parser.parse_args(["--config", str(config), "eval-occ", "r", "g", "--occ-threshold", "0.7"]))
    assert settings.occ_threshold == 0.7


def test_bad_config_key_fails(tmp_path, capsys, pts_file, box_args):
    config = tmp_path / "settings.toml"
    config.write_text("occ_treshold = 0.5\n")
    assert run("encode", pts_file, *box_args, "-o", tmp_path / "x.ohm", "--config", config) == 1
    assert "occ_treshold" in capsys.readouterr().err


def test_refine_rejects_wrong_map_size(tmp_path, capsys, box_args):
    (tmp_path / "maps").mkdir()
    write_heatmaps(tmp_path / "maps" / "small.ohm", np.zeros((68, 32, 32)))
    box = [float(v) for v in box_args[1:]]
    write_jsonl(tmp_path / "dets.jsonl", [DetectionRecord(image_id="face", box=box, heatmaps="maps/small.ohm")])

    assert run("refine", tmp_path / "dets.jsonl", "-o", tmp_path / "refined.jsonl") == 1
    err = capsys.readouterr().err.strip().splitlines()
    assert err[-1].startswith("error: FormatError:")
    assert "small.ohm: maps are 32x32" in err[-1]
