"""
Command-line application for the landmark pipeline.

This module wires every pipeline stage into a subcommand: encode, decode,
refine, pose, augment, synth, eval-det, eval-occ, eval-yaw and features.
"""

import argparse
import json
import logging
import os
import sys
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from dotenv import load_dotenv
from rich.console import Console
from rich.logging import RichHandler

from app.schemas import (
    DetectionRecord,
    GroundTruthRecord,
    PipelineSettings,
    PoseRecord,
    SampleRecord,
)
from landmark_pipeline.augmentation import (
    NoiseModel,
    OccluderLibrary,
    SamplerConfig,
    detection_boxes,
    generate_samples,
    random_occlusion,
    synth_predict,
)
from landmark_pipeline.builder import LandmarkPipeline, create_pipeline
from landmark_pipeline.evaluation import (
    AnnotatedFace,
    ScoredFace,
    average_precision,
    evaluate_occlusion,
    evaluate_yaw,
    feature_frame,
    match_dataset,
    pr_curve,
)
from landmark_pipeline.geometry import (
    SCORE_SIZE,
    Box,
    box_from_landmarks,
    iou,
    map_points,
    original_frame,
    score_frame,
)
from landmark_pipeline.heatmap import EncodeParams, LandmarkState, decode_stack, encode_stack
from landmark_pipeline.landmarks import N_LANDMARKS, LandmarkSet, canonical_face
from landmark_pipeline.pose import CameraIntrinsics, estimate_pose, load_face_model
from landmark_pipeline.scoring import Detection, merge_detections
from landmark_pipeline.utils import (
    read_heatmaps,
    read_image,
    read_jsonl,
    read_pts,
    write_heatmaps,
    write_image,
    write_jsonl,
    write_pts,
)

logger = logging.getLogger(__name__)

DEFAULT_OCC_THRESHOLDS = [float(t) for t in np.round(np.linspace(-1.0, 1.0, 21), 6)]


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

def load_settings(args: argparse.Namespace) -> PipelineSettings:
    """
    Merge defaults < LANDMARK_* environment < --config TOML < flags.
    """
    load_dotenv()
    values = {}
    for name in PipelineSettings.model_fields:
        env = os.getenv(f"LANDMARK_{name.upper()}")
        if env:
            values[name] = env
    config = getattr(args, "config", None)
    if config:
        with open(config, "rb") as fh:
            values.update(tomllib.load(fh))
    for name in PipelineSettings.model_fields:
        flag = getattr(args, name, None)
        if flag is not None:
            values[name] = flag
    return PipelineSettings(**values)


def setup_logging(verbose: bool = False, quiet: bool = False) -> None:
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(
        level=level,
        format="%(message)s",
        handlers=[RichHandler(console=Console(stderr=True), show_path=False)],
    )
    logging.getLogger().setLevel(level)


def _make_pipeline(settings: PipelineSettings) -> LandmarkPipeline:
    return create_pipeline(
        occ_threshold=settings.occ_threshold,
        nms_overlap=settings.nms_overlap,
        sigma=settings.sigma,
        focal=settings.focal,
        model_path=settings.model,
        exclude_occluded=settings.pose_exclude_occluded,
    )


def _parse_box(values: Sequence[float]) -> Box:
    return Box(*[float(v) for v in values])


def _write_text(out: Optional[str], text: str) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _write_csv(out: Optional[str], frame) -> None:
    _write_text(out, frame.to_csv(index=False, float_format="%.6f"))


def _landmark_fields(lms: LandmarkSet) -> dict:
    return {
        "landmarks": [
            (float(x), float(y)) if d else None
            for (x, y), d in zip(lms.points, lms.detected)
        ],
        "occ_scores": [float(s) for s in lms.occ_score],
        "occ_flags": [bool(f) for f in lms.occ_flag],
    }


# ---------------------------------------------------------------------------
# encode / decode
# ---------------------------------------------------------------------------

def cmd_encode(args, settings: PipelineSettings) -> None:
    points = read_pts(args.pts)
    box = _parse_box(args.box)
    flags = np.zeros(N_LANDMARKS, dtype=bool)
    for number in args.occluded or []:
        if not 1 <= number <= N_LANDMARKS:
            raise ValueError(f"Landmark number {number} outside 1..{N_LANDMARKS}")
        flags[number - 1] = True
    score_pts = map_points(points, original_frame(), score_frame(box))
    states = [LandmarkState.OCCLUDED if f else LandmarkState.VISIBLE for f in flags]
    write_heatmaps(args.output, encode_stack(score_pts, states, EncodeParams(sigma=settings.sigma)))
    logger.info(f"Encoded {args.pts} into {args.output}")


def cmd_decode(args, settings: PipelineSettings) -> None:
    stack = read_heatmaps(args.heatmaps, expected_maps=N_LANDMARKS, expected_size=SCORE_SIZE)
    box = _parse_box(args.box)
    lms = decode_stack(stack, box, settings.occ_threshold)
    record = DetectionRecord(image_id=Path(args.heatmaps).stem, box=box.as_list(), **_landmark_fields(lms))
    _write_text(args.output, record.model_dump_json(exclude_none=True) + "\n")
    if args.pts_out:
        write_pts(args.pts_out, lms.points)


# ---------------------------------------------------------------------------
# refine
# ---------------------------------------------------------------------------

_WORKER_PIPELINE: Optional[LandmarkPipeline] = None


def _init_worker(settings_dict: dict) -> None:
    global _WORKER_PIPELINE
    _WORKER_PIPELINE = _make_pipeline(PipelineSettings(**settings_dict))


def _refine_image(pipeline: LandmarkPipeline, task: Tuple[str, list]) -> List[dict]:
    """Refine one image; ``task`` is (image_id, [(input index, record dict, base dir)])."""
    image_id, entries = task
    per_input: Dict[int, List[Detection]] = defaultdict(list)
    image_size = None
    for input_idx, data, base_dir in entries:
        record = DetectionRecord(**data)
        if not record.heatmaps:
            raise ValueError(f"Detection of '{image_id}' has no heatmap file")
        stack = read_heatmaps(Path(base_dir) / record.heatmaps, expected_maps=N_LANDMARKS, expected_size=SCORE_SIZE)
        per_input[input_idx].append(Detection(record.to_box(), record.det_score, stack, image_id))
        image_size = image_size or record.image_size

    detections = merge_detections(*[per_input[k] for k in sorted(per_input)])
    results = []
    for face, pose in pipeline.refine(detections, image_size):
        record = DetectionRecord(
            image_id=image_id,
            box=face.box.as_list(),
            det_score=face.det_score,
            image_size=image_size,
            face_score=face.face_score,
            detection_score=face.detection_score,
            members=face.n_members,
            pose=PoseRecord(**pose.model_dump()) if pose is not None else None,
            pose_reliable=(not face.rigid_occluded()) if pose is not None else None,
            pose_confidence=face.pose_confidence,
            **_landmark_fields(face.landmarks),
        )
        results.append(record.model_dump(exclude_none=True))
    return results


def _refine_in_worker(task: Tuple[str, list]) -> List[dict]:
    return _refine_image(_WORKER_PIPELINE, task)


def cmd_refine(args, settings: PipelineSettings) -> None:
    by_image: Dict[str, list] = {}
    for input_idx, path in enumerate(args.detections):
        base_dir = str(Path(path).parent)
        for record in read_jsonl(path, DetectionRecord):
            by_image.setdefault(record.image_id, []).append((input_idx, record.model_dump(), base_dir))
    tasks = list(by_image.items())
    logger.info(f"Refining {sum(len(v) for v in by_image.values())} detections over {len(tasks)} images")

    if settings.jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(
            max_workers=settings.jobs,
            initializer=_init_worker,
            initargs=(settings.model_dump(),),
        ) as pool:
            per_image = list(pool.map(_refine_in_worker, tasks))
    else:
        pipeline = _make_pipeline(settings)
        per_image = [_refine_image(pipeline, task) for task in tasks]

    records = [DetectionRecord(**r) for faces in per_image for r in faces]
    count = write_jsonl(args.output, records)
    logger.info(f"Wrote {count} refined faces to {args.output}")


# ---------------------------------------------------------------------------
# pose
# ---------------------------------------------------------------------------

def cmd_pose(args, settings: PipelineSettings) -> None:
    model = load_face_model(settings.model)
    if str(args.input).endswith(".pts"):
        if not args.image_size:
            raise ValueError("--image-size is required for a .pts input")
        cam = CameraIntrinsics.for_image(*args.image_size, settings.focal)
        pose = estimate_pose(LandmarkSet.from_points(read_pts(args.input)), cam, model)
        _write_text(args.output, json.dumps(pose.model_dump()) + "\n")
        return

    records = read_jsonl(args.input, DetectionRecord)
    out = []
    for record in records:
        size = tuple(args.image_size) if args.image_size else record.image_size
        if size is None:
            raise ValueError(f"No image size for '{record.image_id}'; pass --image-size")
        cam = CameraIntrinsics.for_image(size[0], size[1], settings.focal)
        pose = estimate_pose(record.to_landmarks(), cam, model, settings.pose_exclude_occluded)
        out.append(record.model_copy(update={"pose": PoseRecord(**pose.model_dump())}))
    if args.output:
        write_jsonl(args.output, out)
    else:
        sys.stdout.write("".join(r.model_dump_json(exclude_none=True) + "\n" for r in out))


# ---------------------------------------------------------------------------
# augment
# ---------------------------------------------------------------------------

def _face_annotations(image_path: Path) -> List[Path]:
    exact = image_path.with_suffix(".pts")
    extra = sorted(image_path.parent.glob(f"{image_path.stem}_*.pts"))
    return ([exact] if exact.exists() else []) + extra


def cmd_augment(args, settings: PipelineSettings) -> None:
    rng = np.random.default_rng(settings.seed)
    cfg = SamplerConfig(pos_per_face=args.pos_per_face, neg_per_image=args.neg_per_image)
    library = OccluderLibrary.from_directory(args.occluders) if args.occluders else None
    params = EncodeParams(sigma=settings.sigma)
    out_dir = Path(args.output)
    (out_dir / "samples").mkdir(parents=True, exist_ok=True)

    records = []
    for image_path in map(Path, args.images):
        pts_files = _face_annotations(image_path)
        if not pts_files:
            logger.warning(f"Skipping {image_path}: no .pts annotation")
            continue
        faces = [LandmarkSet.from_points(read_pts(p)) for p in pts_files]
        samples = generate_samples(read_image(image_path), faces, cfg, rng, library)
        for k, sample in enumerate(samples):
            stem = f"{image_path.stem}_{k:04d}"
            write_image(out_dir / "samples" / f"{stem}.png", sample.image)
            write_heatmaps(out_dir / "samples" / f"{stem}.ohm", sample.labels(params))
            records.append(SampleRecord(
                image=f"samples/{stem}.png",
                labels=f"samples/{stem}.ohm",
                source=str(image_path),
                window=sample.window.as_list(),
                positive=sample.positive,
                occ_flags=[bool(f) for f in sample.landmarks.occ_flag] if sample.landmarks is not None else None,
            ))
    write_jsonl(out_dir / "samples.jsonl", records)
    logger.info(f"Wrote {len(records)} samples to {out_dir}")


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

def _synthetic_face(rng: np.random.Generator, width: int, height: int) -> np.ndarray:
    scale = rng.uniform(0.1, 0.25) * min(width, height)
    margin = 1.3 * scale
    center = (rng.uniform(margin, width - margin), rng.uniform(margin, height - margin))
    return canonical_face(center, scale)


def cmd_synth(args, settings: PipelineSettings) -> None:
    rng = np.random.default_rng(settings.seed)
    noise = NoiseModel(
        pixel_noise_sigma=args.pixel_noise,
        center_jitter_sigma=args.center_jitter,
        amplitude_scale_range=tuple(args.amplitude_range),
        dropout_prob=args.dropout,
    )
    params = EncodeParams(sigma=settings.sigma)
    cfg = SamplerConfig()
    width, height = args.image_size
    out_dir = Path(args.output)
    (out_dir / "heatmaps").mkdir(parents=True, exist_ok=True)

    if args.pts:
        sources = [(Path(p).stem, read_pts(p)) for p in args.pts]
    else:
        sources = [(f"synth_{i:04d}", _synthetic_face(rng, width, height)) for i in range(args.faces)]

    detections, truths = [], []
    for image_id, points in sources:
        face_box = box_from_landmarks(points)
        flags = np.zeros(N_LANDMARKS, dtype=bool)
        if rng.random() < args.occlusion_rate:
            _, flags = random_occlusion(points, face_box, cfg, rng)
        truths.append(GroundTruthRecord(
            image_id=image_id,
            landmarks=[(float(x), float(y)) for x, y in points],
            occ_flags=[bool(f) for f in flags],
            box=face_box.as_list(),
        ))
        for k, box in enumerate(detection_boxes(face_box, args.detections_per_face, rng)):
            score_pts = map_points(points, original_frame(), score_frame(box))
            stack = synth_predict(LandmarkSet.from_points(score_pts, flags, score_frame(box)), noise, rng, params)
            rel = f"heatmaps/{image_id}_{k}.ohm"
            write_heatmaps(out_dir / rel, stack)
            detections.append(DetectionRecord(
                image_id=image_id,
                box=box.as_list(),
                det_score=round(iou(box, face_box), 6),
                heatmaps=rel,
                image_size=(width, height),
            ))
    write_jsonl(out_dir / "detections.jsonl", detections)
    write_jsonl(out_dir / "gt.jsonl", truths)
    logger.info(f"Synthesized {len(truths)} faces and {len(detections)} detections in {out_dir}")


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def _predictions(path: str) -> List[ScoredFace]:
    faces = []
    for record in read_jsonl(path, DetectionRecord):
        faces.append(ScoredFace(
            image_id=record.image_id,
            box=record.to_box(),
            score=record.face_score if record.face_score is not None else record.det_score,
            landmarks=record.to_landmarks() if record.landmarks is not None else None,
            yaw=record.pose.yaw if record.pose is not None else None,
        ))
    return faces


def _truths(path: str) -> List[AnnotatedFace]:
    return [
        AnnotatedFace(image_id=r.image_id, box=r.to_box(), landmarks=r.to_landmarks(), yaw=r.yaw)
        for r in read_jsonl(path, GroundTruthRecord)
    ]


def cmd_eval_det(args, settings: PipelineSettings) -> None:
    results = match_dataset(_predictions(args.refined), _truths(args.gt), settings.pascal_iou)
    curve = pr_curve(results)
    logger.info(f"Average precision: {average_precision(curve):.4f}")
    _write_csv(args.output, curve.to_frame())


def cmd_eval_occ(args, settings: PipelineSettings) -> None:
    thresholds = args.thresholds if args.thresholds else DEFAULT_OCC_THRESHOLDS
    curve = evaluate_occlusion(_predictions(args.refined), _truths(args.gt), thresholds, settings.pascal_iou)
    _write_csv(args.output, curve.to_frame())


def cmd_eval_yaw(args, settings: PipelineSettings) -> None:
    metrics = evaluate_yaw(_predictions(args.refined), _truths(args.gt), settings.pascal_iou, args.tolerance)
    frame = pd.DataFrame([{
        "detection_rate": metrics.detection_rate,
        "success_rate": metrics.success_rate,
        "mean_abs_err": metrics.mean_abs_err,
        "std_abs_err": metrics.std_abs_err,
        "n_gt": metrics.n_gt,
        "n_matched": metrics.n_matched,
        "valid": metrics.valid,
    }])
    _write_csv(args.output, frame)


def cmd_features(args, settings: PipelineSettings) -> None:
    if len(args.inputs) == 1 and not args.inputs[0].endswith(".pts"):
        sequence, seen = [], set()
        for record in read_jsonl(args.inputs[0], DetectionRecord):
            # Refined output lists each image's best face first.
            if record.image_id in seen or record.landmarks is None:
                continue
            seen.add(record.image_id)
            sequence.append(record.to_landmarks())
    else:
        sequence = [LandmarkSet.from_points(read_pts(p)) for p in args.inputs]
    _write_csv(args.output, feature_frame(sequence))


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def _common_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", help="TOML file with settings (keys mirror the flags)")
    common.add_argument("--occ-threshold", dest="occ_threshold", type=float, help="Occlusion threshold (default 0.2)")
    common.add_argument("--nms-overlap", dest="nms_overlap", type=float, help="NMS grouping IOU (default 0.2)")
    common.add_argument("--sigma", type=float, help="Gaussian label width (default 1.5)")
    common.add_argument("--focal", type=float, help="Focal length in pixels (default: image width)")
    common.add_argument("--model", help="3D face model CSV")
    common.add_argument("--seed", type=int, help="Random seed (default 0)")
    common.add_argument("--jobs", type=int, help="Worker processes (default 1)")
    common.add_argument("--pascal-iou", dest="pascal_iou", type=float, help="Face matching IOU (default 0.5)")
    common.add_argument(
        "--pose-exclude-occluded", dest="pose_exclude_occluded", action="store_true",
        help="Drop occluded rigid landmarks from pose",
    )
    common.add_argument("-v", "--verbose", action="store_true", help="Debug logging")
    common.add_argument("-q", "--quiet", action="store_true", help="Warnings and errors only")
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common_parser()
    parser = argparse.ArgumentParser(
        prog="landmarks",
        description="Occlusion-aware facial landmark pipeline",
        parents=[common],
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("encode", parents=[common], help="pts + box -> heatmap file")
    p.add_argument("pts")
    p.add_argument("--box", nargs=4, type=float, required=True, metavar=("X", "Y", "W", "H"))
    p.add_argument("--occluded", nargs="*", type=int, metavar="N", help="1-based landmark numbers to mark occluded")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("decode", parents=[common], help="heatmap file + box -> landmarks JSON")
    p.add_argument("heatmaps")
    p.add_argument("--box", nargs=4, type=float, required=True, metavar=("X", "Y", "W", "H"))
    p.add_argument("-o", "--output")
    p.add_argument("--pts-out", dest="pts_out", help="Also write the landmarks as a .pts file")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("refine", parents=[common], help="detections JSONL -> refined JSONL")
    p.add_argument("detections", nargs="+", help="One or more detection JSONL files (outputs are merged)")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("pose", parents=[common], help="landmarks -> head pose")
    p.add_argument("input", help=".pts file or refined JSONL")
    p.add_argument("--image-size", dest="image_size", nargs=2, type=int, metavar=("W", "H"))
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_pose)

    p = sub.add_parser("augment", parents=[common], help="images + pts -> training samples")
    p.add_argument("images", nargs="+", help="Images with <stem>.pts / <stem>_<k>.pts annotations alongside")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--occluders", help="Directory of <category>/*.png RGBA occluders")
    p.add_argument("--pos-per-face", dest="pos_per_face", type=int, default=90)
    p.add_argument("--neg-per-image", dest="neg_per_image", type=int, default=60)
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("synth", parents=[common], help="pts or synthetic faces -> noisy heatmaps")
    p.add_argument("pts", nargs="*", help="Annotations to synthesize from (default: generated faces)")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--faces", type=int, default=50, help="Generated faces when no pts is given")
    p.add_argument("--image-size", dest="image_size", nargs=2, type=int, default=[640, 480], metavar=("W", "H"))
    p.add_argument("--detections-per-face", dest="detections_per_face", type=int, default=1)
    p.add_argument("--occlusion-rate", dest="occlusion_rate", type=float, default=0.5,
                   help="Probability that a face gets a random occluder")
    p.add_argument("--pixel-noise", dest="pixel_noise", type=float, default=0.0)
    p.add_argument("--center-jitter", dest="center_jitter", type=float, default=0.0)
    p.add_argument("--amplitude-range", dest="amplitude_range", nargs=2, type=float, default=[1.0, 1.0])
    p.add_argument("--dropout", type=float, default=0.0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("eval-det", parents=[common], help="detection precision/recall CSV")
    p.add_argument("refined")
    p.add_argument("gt")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_eval_det)

    p = sub.add_parser("eval-occ", parents=[common], help="occlusion precision/recall CSV")
    p.add_argument("refined")
    p.add_argument("gt")
    p.add_argument("--thresholds", nargs="+", type=float)
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_eval_occ)

    p = sub.add_parser("eval-yaw", parents=[common], help="yaw metrics CSV")
    p.add_argument("refined")
    p.add_argument("gt")
    p.add_argument("--tolerance", type=float, default=15.0)
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_eval_yaw)

    p = sub.add_parser("features", parents=[common], help="eye/mouth openness CSV")
    p.add_argument("inputs", nargs="+", help="Sequence of .pts files, or one refined JSONL")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_features)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    setup_logging(getattr(args, "verbose", False), getattr(args, "quiet", False))
    try:
        settings = load_settings(args)
        args.func(args, settings)
    except (ValueError, OSError) as e:
        logger.debug(f"{args.command} failed", exc_info=True)
        message = "; ".join(line.strip() for line in str(e).splitlines() if line.strip())
        print(f"error: {type(e).__name__}: {message}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
