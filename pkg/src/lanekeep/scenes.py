"""Seeded synthetic scenes with pixel-exact ground truth.

Every scene is rendered by the simulator's camera so the truth labels and
the binary frame share one geometry.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .imagecore import BinaryImage
from .perception import (BasePoints, PerceptionConfig, Side, box_kernel, column_histogram, convolve_histogram,
                         find_base_points, sliding_window_track, track_lanes)
from .simulator import (LEFT_LINE, RIGHT_LINE, Arc, CameraModel, NoiseModel, RoadModel, Straight, VehicleState,
                        pose_at, render_camera, render_lane_labels, road_points)

SLIDING_WINDOW = (80, 40)
SLIDING_WINDOWS = 9


@dataclass(frozen=True, eq=False)
class Scene:
    image: BinaryImage
    labels: np.ndarray  # uint8, 0 background, 1 left line, 2 right line
    offset: float  # m, vehicle offset from the lane center
    heading_rel: float  # rad
    road: RoadModel
    arclength: float
    pose: VehicleState


def render_scene(road: RoadModel, s0: float, offset: float, heading_rel: float, cam: CameraModel,
                 noise: NoiseModel, rng: np.random.Generator) -> Scene:
    pose = pose_at(road, s0, offset, heading_rel)
    labels = render_lane_labels(road, pose, cam, hint=s0)
    img = render_camera(road, pose, cam, noise, rng, hint=s0)
    return Scene(img, labels, offset, heading_rel, road, s0, pose)


def truth_signals(road: RoadModel, pose: VehicleState, cam: CameraModel, s_hint: float,
                  step: float = 1e-3) -> tuple[float, float]:
    """Exact (distance_error px, alpha deg) of the lane center at the bottom image row.

    The centerline is sampled around ``s_hint`` and expressed in the vehicle
    frame; the crossing of the bottom-row look-ahead distance gives the
    lateral position and the tangent direction. Returns NaNs when the
    centerline does not cross that row.
    """
    reach = cam.mount_offset + cam.view_length + cam.view_width
    s = np.arange(max(0.0, s_hint - reach), min(road.total_length, s_hint + reach), step)
    x, y, h = road_points(road, s)
    c, sn = math.cos(pose.heading), math.sin(pose.heading)
    fwd = (x - pose.x) * c + (y - pose.y) * sn
    lat = -(x - pose.x) * sn + (y - pose.y) * c
    target = cam.mount_offset
    crossing = np.nonzero((fwd[:-1] - target) * (fwd[1:] - target) <= 0)[0]
    if len(crossing) == 0:
        return math.nan, math.nan
    i = int(crossing[np.argmin(np.abs(lat[crossing]))])
    span = fwd[i + 1] - fwd[i]
    u = 0.0 if span == 0 else (target - fwd[i]) / span
    lateral = lat[i] + u * (lat[i + 1] - lat[i])
    tangent = h[i] + u * (h[i + 1] - h[i]) - pose.heading
    alpha = math.degrees(math.atan2(math.sin(tangent), math.cos(tangent)))
    return lateral * cam.px_per_m, alpha


def base_point_scene(seed: int, salt_prob: float = 0.01, cam: CameraModel = CameraModel()) -> Scene:
    """Gently curved two-lane frame with a random offset and heading."""
    rng = np.random.default_rng(seed)
    radius = float(rng.uniform(3.0, 10.0)) * (1 if rng.random() < 0.5 else -1)
    road = RoadModel((Straight(1.0), Arc(abs(radius), 2.0 / radius)))
    offset = float(rng.uniform(-0.06, 0.06))
    heading = math.radians(float(rng.uniform(-6.0, 6.0)))
    return render_scene(road, 0.8, offset, heading, cam, NoiseModel(salt_prob=salt_prob), rng)


def sharp_turn_scene(seed: int, salt_prob: float = 0.002, cam: CameraModel = CameraModel()) -> Scene:
    """Lane pair entering a tight quarter turn so the lines leave the image side."""
    rng = np.random.default_rng(seed)
    sign = 1 if rng.random() < 0.5 else -1
    radius = float(rng.uniform(0.35, 0.55))
    lead = float(rng.uniform(0.05, 0.2))
    road = RoadModel((Straight(1.0), Arc(radius, sign * math.pi / 2), Straight(1.0)), lane_width=0.4)
    offset = float(rng.uniform(-0.03, 0.03))
    heading = math.radians(float(rng.uniform(-3.0, 3.0)))
    return render_scene(road, 1.0 - lead, offset, heading, cam, NoiseModel(salt_prob=salt_prob), rng)


def moderate_curve_scene(seed: int, salt_prob: float = 0.002, cam: CameraModel = CameraModel()) -> Scene:
    rng = np.random.default_rng(seed)
    sign = 1 if rng.random() < 0.5 else -1
    radius = float(rng.uniform(1.5, 4.0))
    road = RoadModel((Straight(1.0), Arc(radius, sign * 1.0)))
    offset = float(rng.uniform(-0.03, 0.03))
    heading = math.radians(float(rng.uniform(-3.0, 3.0)))
    return render_scene(road, 0.9, offset, heading, cam, NoiseModel(salt_prob=salt_prob), rng)


def straight_scene(seed: int, salt_prob: float = 0.0, cam: CameraModel = CameraModel()) -> Scene:
    rng = np.random.default_rng(seed)
    road = RoadModel((Straight(3.0),))
    offset = float(rng.uniform(-0.03, 0.03))
    return render_scene(road, 1.0, offset, 0.0, cam, NoiseModel(salt_prob=salt_prob), rng)


def true_base_columns(labels: np.ndarray, row_fraction: float = 1.0 / 3.0) -> tuple[Optional[float], Optional[float]]:
    """Mean column of each line's noise-free pixels in the bottom band."""
    height = labels.shape[0]
    band = labels[height - max(1, int(round(height * row_fraction))):]
    out = []
    for line in (LEFT_LINE, RIGHT_LINE):
        cols = np.nonzero(band == line)[1]
        out.append(float(cols.mean()) if len(cols) else None)
    return out[0], out[1]


def scene_base_points(img: BinaryImage, cfg: PerceptionConfig = PerceptionConfig()) -> BasePoints:
    hist = convolve_histogram(column_histogram(img, cfg.row_fraction), box_kernel(cfg.kernel_width))
    return find_base_points(hist, cfg.split)


def capture_fraction(points: np.ndarray, truth: np.ndarray) -> float:
    """Share of truth pixels contained in ``points`` ((N, 2) x, y)."""
    total = int(truth.sum())
    if total == 0:
        return 1.0
    hit = np.zeros_like(truth, dtype=bool)
    if len(points):
        hit[points[:, 1], points[:, 0]] = True
    return float((hit & truth).sum()) / total


def compare_trackers(img: BinaryImage, labels: np.ndarray, cfg: PerceptionConfig = PerceptionConfig(),
                     window: tuple[int, int] = SLIDING_WINDOW, n_windows: int = SLIDING_WINDOWS
                     ) -> tuple[float, float]:
    """(ribbon, sliding-window) capture fractions of all labelled lane pixels."""
    bases = scene_base_points(img, cfg)
    truth = labels > 0
    ribbon = track_lanes(img, bases, cfg.ribbon)
    sliding = [sliding_window_track(img, b, window, n_windows, side)
               for b, side in ((bases.left, Side.LEFT), (bases.right, Side.RIGHT)) if b is not None]
    empty = np.empty((0, 2), dtype=np.int64)
    ribbon_pts = np.concatenate([c.points for c in ribbon if c is not None] or [empty])
    sliding_pts = np.concatenate([c.points for c in sliding] or [empty])
    return capture_fraction(ribbon_pts, truth), capture_fraction(sliding_pts, truth)


def exits_side(labels: np.ndarray) -> bool:
    """True when some lane line touches the left or right image border."""
    return bool((labels[:, 0] > 0).any() or (labels[:, -1] > 0).any())
