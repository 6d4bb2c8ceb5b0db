#!/usr/bin/env python3
"""
Smoke check for the landmark pipeline.

This script checks:
1. Heatmap encode/decode round trip on random landmarks
2. Fusion of jittered noisy detections against single detections
3. POSIT head pose on synthetic projections
4. The synth -> refine -> eval-occ command-line chain
"""

import sys
import tempfile
import time
from pathlib import Path

import numpy as np
import pandas as pd
from dotenv import load_dotenv
from rich.console import Console
from rich.panel import Panel
from rich.table import Table

from app.main import main as cli_main
from landmark_pipeline.augmentation import NoiseModel, detection_boxes, synth_predict
from landmark_pipeline.geometry import box_from_landmarks, map_points, original_frame, score_frame
from landmark_pipeline.heatmap import decode_maps, encode_stack, states_from_flags
from landmark_pipeline.landmarks import N_LANDMARKS, LandmarkSet, canonical_face
from landmark_pipeline.pose import (
    CameraIntrinsics,
    PoseError,
    camera_to_head,
    euler_to_rotation,
    load_face_model,
    posit,
    project,
    rotation_to_euler,
)
from landmark_pipeline.scoring import Detection, nms_group, refine, score_detection

load_dotenv()

console = Console()


def print_header():
    console.print()
    console.print(
        Panel.fit(
            "[bold cyan]Occlusion-Aware Landmark Pipeline - Smoke Check[/bold cyan]\n"
            "[dim]Codec, fusion, pose and command-line chain[/dim]",
            border_style="cyan",
        )
    )
    console.print()


def check_codec(rng: np.random.Generator) -> bool:
    """Encode random landmarks and decode them again."""
    console.print("\n[bold yellow]═══ Check 1: Heatmap Codec ═══[/bold yellow]\n")
    start = time.perf_counter()
    errors, signs = [], []
    for _ in range(15):
        points = rng.uniform(4.0, 60.0, (N_LANDMARKS, 2))
        flags = rng.random(N_LANDMARKS) < 0.3
        locs, raw, _ = decode_maps(encode_stack(points, states_from_flags(flags)))
        errors.extend(np.linalg.norm(locs - points, axis=1))
        signs.extend((raw < 0) == flags)
    elapsed = time.perf_counter() - start

    table = Table(show_header=True, header_style="bold magenta")
    table.add_column("Metric", style="cyan")
    table.add_column("Value", style="green")
    table.add_row("Landmarks", str(len(errors)))
    table.add_row("Max error (score px)", f"{max(errors):.4f}")
    table.add_row("Sign accuracy", f"{np.mean(signs):.2%}")
    table.add_row("Time", f"{elapsed:.2f}s")
    console.print(table)

    ok = max(errors) < 0.1 and all(signs)
    console.print("[green]✓ Codec round trip passed[/green]" if ok else "[red]✗ Codec round trip failed[/red]")
    return ok


def check_fusion(rng: np.random.Generator, faces: int = 30) -> bool:
    """Compare fused landmarks with single-detection landmarks."""
    console.print("\n[bold yellow]═══ Check 2: Detection Fusion ═══[/bold yellow]\n")
    noise = NoiseModel(pixel_noise_sigma=0.05, center_jitter_sigma=0.5)
    single, fused = [], []
    with console.status("[bold cyan]Fusing detections...", spinner="dots"):
        for _ in range(faces):
            points = canonical_face((320.0, 240.0), rng.uniform(60.0, 100.0))
            dets = []
            for k, box in enumerate(detection_boxes(box_from_landmarks(points), 5, rng)):
                score_pts = map_points(points, original_frame(), score_frame(box))
                gt = LandmarkSet.from_points(score_pts, frame=score_frame(box))
                dets.append(Detection(box, 1.0, synth_predict(gt, noise, rng), "smoke", k))
            scored = [score_detection(d) for d in dets]
            single.extend(np.nanmean(np.linalg.norm(s.landmarks.points - points, axis=1)) for s in scored)
            best = max((refine(g) for g in nms_group(scored)), key=lambda f: f.n_members)
            fused.append(np.nanmean(np.linalg.norm(best.landmarks.points - points, axis=1)))

    console.print(f"  Mean single-detection error: [cyan]{np.mean(single):.3f}px[/cyan]")
    console.print(f"  Mean fused error:            [cyan]{np.mean(fused):.3f}px[/cyan]")
    ok = np.mean(fused) < np.mean(single)
    console.print("[green]✓ Fusion lowers the error[/green]" if ok else "[red]✗ Fusion did not help[/red]")
    return ok


def check_pose(rng: np.random.Generator, poses: int = 200) -> bool:
    """Recover random head poses from noise-free projections."""
    console.print("\n[bold yellow]═══ Check 3: Head Pose ═══[/bold yellow]\n")
    model = load_face_model()
    cam = CameraIntrinsics(focal=1000.0, cx=320.0, cy=240.0)
    worst = 0.0
    failures = 0
    for _ in range(poses):
        yaw, pitch, roll = rng.uniform(-60, 60), rng.uniform(-30, 30), rng.uniform(-20, 20)
        rotation = camera_to_head(euler_to_rotation(yaw, pitch, roll))
        image_pts = project(model, rotation, np.array([0.0, 0.0, rng.uniform(600, 1200)]), cam)
        try:
            got = rotation_to_euler(camera_to_head(posit(model, image_pts, cam).rotation))
        except PoseError as e:
            console.print(f"[red]✗ {e}[/red]")
            failures += 1
            continue
        worst = max(worst, abs(got.yaw - yaw), abs(got.pitch - pitch), abs(got.roll - roll))

    console.print(f"  Worst angle error over {poses} poses: [cyan]{worst:.4f}°[/cyan]")
    ok = failures == 0 and worst < 0.5
    console.print("[green]✓ POSIT recovers the poses[/green]" if ok else "[red]✗ POSIT check failed[/red]")
    return ok


def check_cli() -> bool:
    """Run synth -> refine -> eval-occ in a temporary directory."""
    console.print("\n[bold yellow]═══ Check 4: Command-Line Chain ═══[/bold yellow]\n")
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        steps = [
            ["synth", "-o", str(tmp / "synth"), "--faces", "20", "--seed", "1", "-q"],
            ["refine", str(tmp / "synth" / "detections.jsonl"), "-o", str(tmp / "refined.jsonl"), "-q"],
            ["eval-occ", str(tmp / "refined.jsonl"), str(tmp / "synth" / "gt.jsonl"),
             "--thresholds", "0", "0.2", "-o", str(tmp / "occ.csv"), "-q"],
        ]
        for argv in steps:
            code = cli_main(argv)
            console.print(f"  landmarks {argv[0]:<9} exit {code}")
            if code != 0:
                console.print(f"[red]✗ {argv[0]} failed[/red]")
                return False
        frame = pd.read_csv(tmp / "occ.csv")

    table = Table(show_header=True, header_style="bold magenta")
    for col in frame.columns:
        table.add_column(col, style="cyan")
    for _, row in frame.iterrows():
        table.add_row(*[f"{v:.3f}" for v in row])
    console.print(table)

    at_zero = frame[frame["threshold"] == 0.0].iloc[0]
    ok = at_zero["precision"] == 1.0 and at_zero["recall"] == 1.0
    console.print("[green]✓ Noise-free occlusion labels recovered[/green]" if ok else "[red]✗ Occlusion P/R below 1[/red]")
    return ok


def main() -> int:
    print_header()
    rng = np.random.default_rng(0)
    results = {
        "codec": check_codec(rng),
        "fusion": check_fusion(rng),
        "pose": check_pose(rng),
        "cli": check_cli(),
    }

    summary = Table(title="Summary", show_header=True, header_style="bold magenta")
    summary.add_column("Check", style="cyan")
    summary.add_column("Result")
    for name, ok in results.items():
        summary.add_row(name, "[green]passed[/green]" if ok else "[red]failed[/red]")
    console.print()
    console.print(summary)
    return 0 if all(results.values()) else 1


if __name__ == "__main__":
    sys.exit(main())
