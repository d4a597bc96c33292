"""``lanekeep`` command-line entry point.

Exit codes: 0 success, 2 input or configuration error, 3 domain failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import re
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import parking as pk
from .config import ConfigError, ParkingConfig, ScenarioConfig, config_to_dict, load_config
from .imagecore import GrayImage, MalformedHeader, TruncatedData, load_pgm, save_pgm
from .perception import NoLanesVisible, process_frame
from .scenes import compare_trackers, sharp_turn_scene, true_base_columns, truth_signals
from .simulator import LEFT_LINE, RIGHT_LINE, pose_at, render_camera, render_lane_labels, run_scenario

EXIT_OK, EXIT_INPUT, EXIT_DOMAIN = 0, 2, 3

FRAME_RE = re.compile(r"^frame_(\d{6})\.pgm$")
TRUTH_LEVELS = {LEFT_LINE: 100, RIGHT_LINE: 200}


class InputError(Exception):
    pass


class DomainError(Exception):
    pass


# --- helpers -------------------------------------------------------------------

def _dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _out_dir(args) -> Path:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise InputError(f"cannot create output directory {out}: {exc.strerror}") from None
    return out


def _config(args) -> ScenarioConfig:
    cfg = load_config(args.config) if args.config else ScenarioConfig()
    return cfg.with_seed(args.seed)


def labels_to_gray(labels: np.ndarray) -> GrayImage:
    out = np.zeros(labels.shape, dtype=np.uint8)
    for label, level in TRUTH_LEVELS.items():
        out[labels == label] = level
    return GrayImage(out)


def gray_to_labels(img: GrayImage) -> np.ndarray:
    out = np.zeros(img.data.shape, dtype=np.uint8)
    for label, level in TRUTH_LEVELS.items():
        out[img.data == level] = label
    return out


# --- commands ------------------------------------------------------------------

TRUTH_HEADER = ["frame", "arclength_m", "offset_m", "heading_rel_rad", "distance_error_px", "alpha_deg",
                "base_left_px", "base_right_px"]


def cmd_gen_scene(args) -> int:
    cfg = _config(args)
    out = _out_dir(args)
    cam = cfg.camera
    rng = np.random.default_rng(cfg.rng_seed)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(TRUTH_HEADER)
    for i in range(cfg.scene.frames):
        if cfg.scene.kind == "sharp_turn":
            sc = sharp_turn_scene(cfg.rng_seed * 1000 + i, cfg.noise.salt_prob, cam)
            road, s, pose, img, labels = sc.road, sc.arclength, sc.pose, sc.image, sc.labels
            offset, heading = sc.offset, sc.heading_rel
        else:
            road = cfg.road
            s = cfg.start.arclength + i * cfg.scene.stride
            if s + cam.mount_offset + cam.view_length >= road.total_length:
                raise InputError(f"scene.frames: frame {i + 1} runs past the end of the road")
            offset, heading = cfg.start.offset, cfg.start.heading
            pose = pose_at(road, s, offset, heading)
            labels = render_lane_labels(road, pose, cam, hint=s)
            img = render_camera(road, pose, cam, cfg.noise, rng, hint=s)
        err, alpha = truth_signals(road, pose, cam, s)
        bl, br = true_base_columns(labels)
        name = f"frame_{i + 1:06d}"
        save_pgm(img, out / f"{name}.pgm")
        save_pgm(labels_to_gray(labels), out / f"{name}_truth.pgm")
        writer.writerow([name, repr(float(s)), repr(float(offset)), repr(float(heading)), repr(float(err)),
                         repr(float(alpha)), "" if bl is None else repr(bl), "" if br is None else repr(br)])
    _write(out / "truth.csv", buf.getvalue())
    return EXIT_OK


def cmd_track(args) -> int:
    cfg = _config(args)
    img = load_pgm(args.image, binary=True)
    res = process_frame(img, cfg.perception_config())
    poly = {}
    for side, p in (("left", res.left_poly), ("right", res.right_poly), ("ideal", res.ideal)):
        poly[side] = None if p is None else {"coefficients": [float(c) for c in p.coefficients],
                                             "valid_y_range": [float(v) for v in p.valid_y_range]}
    report = {
        "image": os.path.basename(str(args.image)),
        "base_points": {"left": None if res.bases.left is None else int(res.bases.left),
                        "right": None if res.bases.right is None else int(res.bases.right)},
        "cluster_sizes": {"left": 0 if res.left is None else len(res.left.points),
                          "right": 0 if res.right is None else len(res.right.points)},
        "polynomials": poly,
        "distance_error": float(res.feedback.distance_error),
        "alpha": float(res.feedback.angle_error_alpha),
        "lanes_seen": res.feedback.lanes_seen.value,
    }
    text = _dumps(report)
    if args.out:
        _write(_out_dir(args) / "track.json", text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg = _config(args)
    corpus = Path(args.corpus)
    if not corpus.is_dir():
        raise InputError(f"{corpus}: not a directory")
    frames = sorted(p for p in corpus.iterdir() if FRAME_RE.match(p.name))
    if not frames:
        raise InputError(f"{corpus}: no frame_NNNNNN.pgm files")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["frame", "ribbon_fraction", "sliding_fraction"])
    for path in frames:
        truth_path = path.with_name(path.stem + "_truth.pgm")
        if not truth_path.exists():
            raise InputError(f"{truth_path}: missing truth pixel set")
        img = load_pgm(path, binary=True)
        labels = gray_to_labels(load_pgm(truth_path))
        if labels.shape != img.data.shape:
            raise InputError(f"{truth_path}: size differs from frame")
        ribbon, sliding = compare_trackers(img, labels, cfg.perception_config())
        writer.writerow([path.stem, f"{ribbon:.6f}", f"{sliding:.6f}"])
    if args.out:
        _write(_out_dir(args) / "compare.csv", buf.getvalue())
    else:
        sys.stdout.write(buf.getvalue())
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = _config(args)
    out = _out_dir(args)
    sink = None
    if args.frames:
        frame_dir = out / "frames"
        frame_dir.mkdir(parents=True, exist_ok=True)

        def sink(k, img):
            save_pgm(img, frame_dir / f"frame_{k + 1:06d}.pgm")

    trace = run_scenario(cfg.road, cfg.camera, cfg.noise, cfg.gains, cfg.fusion, cfg.dt, cfg.duration, cfg.speed,
                         wheelbase=cfg.wheelbase, perception=cfg.perception_config(),
                         start_s=cfg.start.arclength, initial_offset=cfg.start.offset,
                         initial_heading=cfg.start.heading, steer_bias=cfg.steer_bias, frame_sink=sink)
    _write(out / "trace.csv", trace.to_csv())
    return EXIT_OK


def _rollout_csv(poses, dt: float) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["t", "x", "y", "heading"])
    for k, p in enumerate(poses):
        writer.writerow([repr(k * dt), repr(p.x), repr(p.y), repr(p.heading)])
    return buf.getvalue()


def park_scan(pc: ParkingConfig) -> pk.RangeScan:
    """Ideal pass along the layout plus the configured spurious echoes."""
    scan = pk.simulate_scan(pc.obstacles, pc.sensor_y, pc.scan_start, pc.scan_end, pc.scan_spacing)
    ranges = scan.ranges.copy()
    for s in pc.spikes:
        ranges[int(np.argmin(np.abs(scan.odometry - s)))] = pc.spike_range_mm
    return pk.RangeScan(scan.odometry, ranges, scan.out_of_range_value)


def cmd_park(args) -> int:
    cfg = _config(args)
    out = _out_dir(args)
    pc = cfg.parking or ParkingConfig()
    raw = park_scan(pc)
    clean = pk.interpolate_scan(raw, pc.max_spike_run, pc.spike_threshold)
    space = pk.detect_space(clean, pc.min_length, pc.min_depth_mm)
    report = {"status": "NoSpace", "space": None, "message": "", "min_space_length":
              pk.min_space_length(pc.vehicle, pc.lateral_gap, pc.margin)}
    plan_json = {"segments": [], "expected_final_pose": None}
    poses = []
    dt = 1e-3
    if space is not None:
        report["space"] = {"start_s": space.start_s, "end_s": space.end_s, "depth": space.depth}
        try:
            plan = pk.plan_park_in(space, pc.vehicle, pc.lateral_gap, pc.margin)
        except pk.SpaceTooSmall as exc:
            report["status"] = "SpaceTooSmall"
            report["message"] = str(exc)
        else:
            start = pk.park_in_start(space, pc.vehicle, pc.lateral_gap, pc.margin)
            poses = pk.rollout(start, plan, pc.vehicle, dt)
            final, target = poses[-1], plan.expected_final_pose
            report["status"] = "Planned"
            report["start_pose"] = {"x": start.x, "y": start.y, "heading": start.heading}
            report["final_position_error"] = math.hypot(final.x - target.x, final.y - target.y)
            report["final_heading_error_deg"] = abs(math.degrees(final.heading - target.heading))
            report["collision_free"] = pk.first_collision(
                poses, pc.vehicle, pk.space_obstacles(space, pc.lateral_gap)) is None
            plan_json = plan.to_json()
    _write(out / "scan.csv", raw.to_csv())
    _write(out / "scan_interpolated.csv", clean.to_csv())
    _write(out / "space.json", _dumps(report))
    _write(out / "plan.json", _dumps(plan_json))
    _write(out / "rollout.csv", _rollout_csv(poses, dt))
    return EXIT_OK


def read_samples(path) -> list[pk.SignHeightSample]:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise InputError(f"{path}: {exc.strerror}") from None
    if not rows or [c.strip() for c in rows[0]] != ["pixel_height", "true_distance"]:
        raise InputError(f"{path}: header must be pixel_height,true_distance")
    samples = []
    for n, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        try:
            samples.append(pk.SignHeightSample(float(row[0]), float(row[1])))
        except (ValueError, IndexError) as exc:
            raise InputError(f"{path}:{n}: {exc}") from None
    return samples


def cmd_fit_distance(args) -> int:
    samples = read_samples(args.samples)
    model = pk.fit_sign_distance_model(samples)
    text = _dumps({"a": model.a, "b": model.b, "fitted_range": list(model.fitted_range)})
    if args.out:
        _write(_out_dir(args) / "model.json", text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_dump_config(args) -> int:
    sys.stdout.write(_dumps(config_to_dict(_config(args))))
    return EXIT_OK


# --- entry ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lanekeep", description="Lane keeping and parking toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=False):
        p.add_argument("--config", help="JSON scenario file (defaults built in)")
        p.add_argument("--seed", type=int, help="override rng_seed")
        p.add_argument("--out", required=out_required, help="output directory")

    p = sub.add_parser("gen-scene", help="render frames, truth labels and truth.csv")
    common(p, out_required=True)
    p.set_defaults(func=cmd_gen_scene)

    p = sub.add_parser("track", help="run the perception pipeline on one PGM")
    p.add_argument("image")
    common(p)
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("compare", help="ribbon vs sliding-window capture fractions over a corpus")
    p.add_argument("corpus")
    common(p)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("simulate", help="closed-loop run, writes trace.csv")
    common(p, out_required=True)
    p.add_argument("--frames", action="store_true", help="also dump every camera frame")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("park", help="scan, detect a space and plan the park-in maneuver")
    common(p, out_required=True)
    p.set_defaults(func=cmd_park)

    p = sub.add_parser("fit-distance", help="fit h = a/d + b to a samples CSV")
    p.add_argument("samples")
    common(p)
    p.set_defaults(func=cmd_fit_distance)

    p = sub.add_parser("dump-config", help="print the effective configuration as JSON")
    common(p)
    p.set_defaults(func=cmd_dump_config)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INPUT
    try:
        return args.func(args)
    except NoLanesVisible as exc:
        print(f"error: no lanes visible ({exc})", file=sys.stderr)
        return EXIT_DOMAIN
    except (ConfigError, InputError, MalformedHeader, TruncatedData, pk.DegenerateSamples) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except OSError as exc:
        print(f"error: {exc.filename}: {exc.strerror}", file=sys.stderr)
        return EXIT_INPUT
    except DomainError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DOMAIN
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
