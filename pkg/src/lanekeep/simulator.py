"""Closed-loop plant for the lane keeper.

World frame conventions: positions in metres, heading in radians measured
from +x toward +y. Steering with delta > 0 increases the heading. For a
tangent direction (cos t, sin t) the road normal is n = (-sin t, cos t);
signed lateral offsets are measured along n. The bird's-eye camera maps n
to the image's +x (rightward) axis and the vehicle heading to image up, so
a vehicle sitting at +d along n sees the centerline d * px_per_m pixels left
of the image center.
"""

from __future__ import annotations

import bisect
import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .control import (ControllerGains, ControllerState, HeadingFusionConfig, fuse_heading,
                      steering_command)
from .imagecore import BinaryImage
from .perception import FeedbackSample, LanesSeen, NoLanesVisible, PerceptionConfig, process_frame

TWO_PI = 2.0 * math.pi
TRACE_HEADER = ("t", "offset_m", "err_px", "alpha_deg", "delta_rad", "lanes")


class OutOfRoad(ValueError):
    pass


class OffRoad(ValueError):
    pass


def wrap_angle(a: float) -> float:
    """Wrap to (-pi, pi]."""
    if -math.pi < a <= math.pi:
        return a
    w = math.fmod(a + math.pi, TWO_PI)
    if w <= 0.0:
        w += TWO_PI
    return w - math.pi


@dataclass(frozen=True)
class VehicleState:
    x: float
    y: float
    heading: float
    speed: float = 0.0


def kinematic_step(s: VehicleState, delta: float, dt: float, wheelbase: float,
                   speed: Optional[float] = None) -> VehicleState:
    """Advance the rear-axle bicycle model by one step (midpoint rule).

    Args:
        speed: signed speed override (negative reverses); defaults to s.speed.
    """
    if dt <= 0:
        raise ValueError("dt must be > 0")
    if wheelbase <= 0:
        raise ValueError("wheelbase must be > 0")
    v = s.speed if speed is None else speed
    dpsi = v / wheelbase * math.tan(delta) * dt
    mid = s.heading + 0.5 * dpsi
    return VehicleState(
        s.x + v * dt * math.cos(mid),
        s.y + v * dt * math.sin(mid),
        wrap_angle(s.heading + dpsi),
        s.speed,
    )


# --- road ----------------------------------------------------------------------

@dataclass(frozen=True)
class Straight:
    length: float

    def __post_init__(self):
        if not self.length > 0:
            raise ValueError("straight length must be > 0")

    @property
    def arc_length(self) -> float:
        return self.length

    @property
    def curvature(self) -> float:
        return 0.0


@dataclass(frozen=True)
class Arc:
    """Circular arc; angle > 0 turns toward +n (heading increases)."""

    radius: float
    angle: float

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("arc radius must be > 0")
        if self.angle == 0 or abs(self.angle) > TWO_PI:
            raise ValueError("arc angle must be non-zero with |angle| <= 2 pi")

    @property
    def arc_length(self) -> float:
        return self.radius * abs(self.angle)

    @property
    def curvature(self) -> float:
        return math.copysign(1.0 / self.radius, self.angle)


Segment = Union[Straight, Arc]


@dataclass(frozen=True)
class RoadPose:
    center: tuple[float, float]
    tangent: float


@dataclass(frozen=True)
class RoadModel:
    segments: tuple
    lane_width: float = 0.4
    line_thickness: float = 0.0225
    origin: tuple[float, float] = (0.0, 0.0)
    initial_heading: float = 0.0

    def __post_init__(self):
        segs = tuple(self.segments)
        if not segs:
            raise ValueError("road needs at least one segment")
        if self.lane_width <= 0 or self.line_thickness <= 0:
            raise ValueError("lane_width and line_thickness must be > 0")
        object.__setattr__(self, "segments", segs)
        starts, xs, ys, hs = [0.0], [float(self.origin[0])], [float(self.origin[1])], [float(self.initial_heading)]
        for seg in segs:
            (x, y), h = _segment_end(seg, xs[-1], ys[-1], hs[-1])
            starts.append(starts[-1] + seg.arc_length)
            xs.append(x)
            ys.append(y)
            hs.append(h)
        object.__setattr__(self, "_starts", tuple(starts))
        object.__setattr__(self, "_poses", tuple(zip(xs, ys, hs)))

    @property
    def total_length(self) -> float:
        return self._starts[-1]

    def segment_index(self, s: float) -> int:
        i = bisect.bisect_right(self._starts, s) - 1
        return min(max(i, 0), len(self.segments) - 1)


def _segment_end(seg: Segment, x: float, y: float, h: float):
    return _segment_eval(seg, x, y, h, seg.arc_length)


def _segment_eval(seg: Segment, x0, y0, h0, u):
    """Pose at local arclength u (scalar or array) along a segment."""
    if isinstance(seg, Straight):
        return (x0 + u * np.cos(h0), y0 + u * np.sin(h0)), h0 + 0.0 * u
    k = seg.curvature
    h = h0 + k * u
    return (x0 + (np.sin(h) - math.sin(h0)) / k, y0 - (np.cos(h) - math.cos(h0)) / k), h


def road_pose(road: RoadModel, arclength: float) -> RoadPose:
    """Centerline point and tangent heading at a given arclength."""
    if not -1e-12 <= arclength <= road.total_length + 1e-12:
        raise OutOfRoad(f"arclength {arclength} outside [0, {road.total_length}]")
    i = road.segment_index(arclength)
    x0, y0, h0 = road._poses[i]
    (x, y), h = _segment_eval(road.segments[i], x0, y0, h0, arclength - road._starts[i])
    return RoadPose((float(x), float(y)), float(h))


def road_points(road: RoadModel, arclengths) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized centerline evaluation: (x, y, tangent) arrays."""
    s = np.clip(np.asarray(arclengths, dtype=float), 0.0, road.total_length)
    idx = np.clip(np.searchsorted(road._starts, s, side="right") - 1, 0, len(road.segments) - 1)
    xs, ys, hs = np.empty_like(s), np.empty_like(s), np.empty_like(s)
    for i in np.unique(idx):
        sel = idx == i
        x0, y0, h0 = road._poses[i]
        (x, y), h = _segment_eval(road.segments[i], x0, y0, h0, s[sel] - road._starts[i])
        xs[sel], ys[sel], hs[sel] = x, y, h
    return xs, ys, hs


def project_points(road: RoadModel, px: np.ndarray, py: np.ndarray,
                   s_window: Optional[tuple[float, float]] = None):
    """Closed-form nearest centerline point for many points at once.

    Returns:
        (arclength, signed offset along n, inside) where ``inside`` is False
        for points whose nearest point is clamped to the road's start or end.
    """
    px = np.asarray(px, dtype=float)
    py = np.asarray(py, dtype=float)
    best_d = np.full(px.shape, np.inf)
    best_s = np.zeros(px.shape)
    best_off = np.zeros(px.shape)
    best_in = np.zeros(px.shape, dtype=bool)
    last = len(road.segments) - 1
    for i, seg in enumerate(road.segments):
        s0, s1 = road._starts[i], road._starts[i + 1]
        if s_window is not None and (s1 < s_window[0] or s0 > s_window[1]):
            continue
        x0, y0, h0 = road._poses[i]
        length = seg.arc_length
        if isinstance(seg, Straight):
            tx, ty = math.cos(h0), math.sin(h0)
            rx, ry = px - x0, py - y0
            u = rx * tx + ry * ty
            uc = np.clip(u, 0.0, length)
            qx, qy = x0 + uc * tx, y0 + uc * ty
            d = np.hypot(px - qx, py - qy)
            off = -(px - qx) * ty + (py - qy) * tx
            off = np.where(u == uc, off, np.copysign(d, off))
            before, after = u < 0.0, u > length
        else:
            sgn = math.copysign(1.0, seg.angle)
            cx = x0 - math.sin(h0) * sgn * seg.radius
            cy = y0 + math.cos(h0) * sgn * seg.radius
            ux, uy = x0 - cx, y0 - cy
            rx, ry = px - cx, py - cy
            phi = np.arctan2(ux * ry - uy * rx, ux * rx + uy * ry)
            psi = np.mod(sgn * phi, TWO_PI)
            span = abs(seg.angle)
            on = psi <= span
            to_end = psi - span
            to_start = TWO_PI - psi
            after = ~on & (to_end <= to_start)
            before = ~on & ~after
            u = np.where(on, psi * seg.radius, np.where(after, length, 0.0))
            rho = np.hypot(rx, ry)
            (qx, qy), qh = _segment_eval(seg, x0, y0, h0, u)
            d = np.where(on, np.abs(seg.radius - rho), np.hypot(px - qx, py - qy))
            off_clamped = -(px - qx) * np.sin(qh) + (py - qy) * np.cos(qh)
            off = np.where(on, sgn * (seg.radius - rho), np.copysign(d, off_clamped))
        inside = np.ones(px.shape, dtype=bool)
        if i == 0:
            inside &= ~before
        if i == last:
            inside &= ~after
        better = d < best_d
        best_d = np.where(better, d, best_d)
        best_s = np.where(better, s0 + u, best_s)
        best_off = np.where(better, off, best_off)
        best_in = np.where(better, inside, best_in)
    return best_s, best_off, best_in


@dataclass(frozen=True)
class LateralState:
    offset: float  # m along n
    heading_rel_road: float  # rad in (-pi, pi]
    arclength: float  # m


_INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0


def _golden_min(f: Callable[[float], float], a: float, b: float, tol: float) -> float:
    c = b - _INV_PHI * (b - a)
    d = a + _INV_PHI * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - _INV_PHI * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + _INV_PHI * (b - a)
            fd = f(d)
    return 0.5 * (a + b)


def lateral_state(road: RoadModel, s: VehicleState, hint: Optional[float] = None,
                  search_radius: float = 1.0) -> LateralState:
    """Signed offset and road-relative heading of the vehicle.

    The nearest centerline arclength is bracketed on a coarse grid and then
    refined by golden-section search to 1e-4 m.

    Args:
        hint: previous arclength; restricts the coarse search to
            [hint - search_radius, hint + search_radius].

    Raises:
        OffRoad: vehicle farther than two lane widths from the centerline.
    """
    total = road.total_length
    lo, hi = (0.0, total) if hint is None else (max(0.0, hint - search_radius), min(total, hint + search_radius))
    step = min(0.05, road.lane_width / 4.0)
    grid = np.linspace(lo, hi, max(3, int(math.ceil((hi - lo) / step)) + 1))
    gx, gy, _ = road_points(road, grid)
    k = int(np.argmin((gx - s.x) ** 2 + (gy - s.y) ** 2))
    a = grid[max(k - 1, 0)]
    b = grid[min(k + 1, len(grid) - 1)]

    def dist2(u: float) -> float:
        p = road_pose(road, min(max(u, 0.0), total))
        return (p.center[0] - s.x) ** 2 + (p.center[1] - s.y) ** 2

    u = _golden_min(dist2, a, b, 1e-4)
    p = road_pose(road, u)
    rx, ry = s.x - p.center[0], s.y - p.center[1]
    if math.hypot(rx, ry) > 2.0 * road.lane_width:
        raise OffRoad(f"vehicle {math.hypot(rx, ry):.3f} m from centerline")
    offset = -rx * math.sin(p.tangent) + ry * math.cos(p.tangent)
    return LateralState(offset, wrap_angle(s.heading - p.tangent), u)


def pose_at(road: RoadModel, arclength: float, offset: float = 0.0, heading_rel: float = 0.0,
            speed: float = 0.0) -> VehicleState:
    """Vehicle state placed relative to the centerline."""
    p = road_pose(road, arclength)
    return VehicleState(p.center[0] - offset * math.sin(p.tangent),
                        p.center[1] + offset * math.cos(p.tangent),
                        wrap_angle(p.tangent + heading_rel), speed)


# --- camera --------------------------------------------------------------------

@dataclass(frozen=True)
class CameraModel:
    """Bird's-eye window in front of the vehicle.

    ``mount_offset`` is the distance from the vehicle reference point (rear
    axle) forward to the ground line imaged by the bottom row.
    """

    view_length: float = 0.6
    view_width: float = 1.0
    image_size: tuple[int, int] = (400, 240)
    mount_offset: float = 0.0

    def __post_init__(self):
        w, h = self.image_size
        object.__setattr__(self, "image_size", (int(w), int(h)))
        if w < 16 or h < 16:
            raise ValueError("image dimensions must be >= 16")
        if self.view_length <= 0 or self.view_width <= 0:
            raise ValueError("view dimensions must be > 0")
        if self.mount_offset < 0:
            raise ValueError("mount_offset must be >= 0")
        if abs(h / self.view_length - self.px_per_m) > 1e-6 * self.px_per_m:
            raise ValueError("image_size and view dimensions imply different px_per_m")

    @property
    def px_per_m(self) -> float:
        return self.image_size[0] / self.view_width

    def pixel_to_vehicle(self) -> tuple[np.ndarray, np.ndarray]:
        """Forward and lateral (+n) distance of every pixel center, shape (H, W)."""
        w, h = self.image_size
        rows, cols = np.mgrid[0:h, 0:w]
        forward = self.mount_offset + (h - 1 - rows) / self.px_per_m
        lateral = (cols - w / 2.0) / self.px_per_m
        return forward, lateral


@dataclass(frozen=True)
class NoiseModel:
    salt_prob: float = 0.0
    dropout_segments_per_frame: int = 0
    dropout_length: float = 0.05
    imu_noise_std: float = 0.0  # deg
    imu_bias: float = 0.0  # deg
    rng_seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.salt_prob <= 1.0:
            raise ValueError("salt_prob must lie in [0, 1]")
        if self.dropout_segments_per_frame < 0 or self.dropout_length < 0:
            raise ValueError("dropout parameters must be >= 0")
        if self.imu_noise_std < 0:
            raise ValueError("imu_noise_std must be >= 0")


LEFT_LINE, RIGHT_LINE = 1, 2


def _camera_geometry(road: RoadModel, s: VehicleState, cam: CameraModel, hint: Optional[float]):
    forward, lateral = cam.pixel_to_vehicle()
    c, sn = math.cos(s.heading), math.sin(s.heading)
    wx = s.x + forward * c - lateral * sn
    wy = s.y + forward * sn + lateral * c
    window = None
    if hint is not None:
        reach = math.hypot(cam.mount_offset + cam.view_length, cam.view_width / 2.0) + road.lane_width
        window = (hint - reach, hint + reach)
    return project_points(road, wx, wy, window)


def render_lane_labels(road: RoadModel, s: VehicleState, cam: CameraModel,
                       hint: Optional[float] = None) -> np.ndarray:
    """Noise-free lane-line labels (0 none, 1 left line, 2 right line), shape (H, W)."""
    arc, off, inside = _camera_geometry(road, s, cam, hint)
    return _labels(road, off, inside)


def _labels(road: RoadModel, off: np.ndarray, inside: np.ndarray) -> np.ndarray:
    half = road.lane_width / 2.0
    tol = road.line_thickness / 2.0
    labels = np.zeros(off.shape, dtype=np.uint8)
    labels[inside & (np.abs(off + half) <= tol)] = LEFT_LINE
    labels[inside & (np.abs(off - half) <= tol)] = RIGHT_LINE
    return labels


def render_camera(road: RoadModel, s: VehicleState, cam: CameraModel, noise: NoiseModel,
                  rng: Optional[np.random.Generator] = None, hint: Optional[float] = None) -> BinaryImage:
    """Rasterize both lane lines into the vehicle's bird's-eye window.

    Dropout segments erase ``dropout_length`` metres of a randomly chosen
    line; salt noise then flips random background pixels on. All randomness
    comes from ``rng`` (seeded from ``noise.rng_seed`` when omitted).
    """
    if rng is None:
        rng = np.random.default_rng(noise.rng_seed)
    arc, off, inside = _camera_geometry(road, s, cam, hint)
    labels = _labels(road, off, inside)
    img = labels > 0
    if noise.dropout_segments_per_frame > 0 and img.any():
        s_lo, s_hi = float(arc[img].min()), float(arc[img].max())
        for _ in range(noise.dropout_segments_per_frame):
            line = LEFT_LINE if rng.random() < 0.5 else RIGHT_LINE
            start = rng.uniform(s_lo - noise.dropout_length, s_hi)
            img &= ~((labels == line) & (arc >= start) & (arc <= start + noise.dropout_length))
    if noise.salt_prob > 0:
        img |= rng.random(img.shape) < noise.salt_prob
    return BinaryImage(img)


def imu_sample(heading_rel_road: float, noise: NoiseModel, rng: np.random.Generator) -> float:
    """Road-relative heading reading in degrees with bias and Gaussian noise."""
    return math.degrees(heading_rel_road) + noise.imu_bias + float(rng.normal(0.0, noise.imu_noise_std))


# --- scenario ------------------------------------------------------------------

@dataclass(frozen=True)
class TraceRow:
    t: float
    lateral_offset_true: float
    distance_error_px: float
    alpha_deg: float
    delta_rad: float
    lanes_seen: str


COMPLETED = "Completed"
VEHICLE_LEFT_ROAD = "VehicleLeftRoad"
ROAD_END = "RoadEnd"


@dataclass
class SimTrace:
    rows: list = field(default_factory=list)
    status: str = COMPLETED
    dt: float = 0.01

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.rows], dtype=float)

    def to_csv(self) -> str:
        out = io.StringIO()
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(TRACE_HEADER)
        for r in self.rows:
            writer.writerow([repr(r.t), repr(r.lateral_offset_true), repr(r.distance_error_px),
                             repr(r.alpha_deg), repr(r.delta_rad), r.lanes_seen])
        out.write(f"# status={self.status}\n")
        return out.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "SimTrace":
        lines = text.splitlines()
        status = COMPLETED
        body = []
        for line in lines:
            if line.startswith("# status="):
                status = line.split("=", 1)[1].strip()
            elif line.strip():
                body.append(line)
        reader = csv.reader(body)
        header = next(reader)
        if tuple(header) != TRACE_HEADER:
            raise ValueError(f"unexpected trace header {header}")
        rows = [TraceRow(float(t), float(o), float(e), float(a), float(d), lanes)
                for t, o, e, a, d, lanes in reader]
        dt = rows[1].t - rows[0].t if len(rows) > 1 else 0.01
        return cls(rows, status, dt)


def _every(rate: float, dt: float) -> int:
    return max(1, int(round(1.0 / (rate * dt))))


def run_scenario(road: RoadModel, cam: CameraModel, noise: NoiseModel, gains: ControllerGains,
                 fusion: HeadingFusionConfig, dt: float, duration: float, v: float, *,
                 wheelbase: float = 0.26, perception: Optional[PerceptionConfig] = None,
                 start_s: float = 0.0, initial_offset: float = 0.0, initial_heading: float = 0.0,
                 steer_bias: float = 0.0, departure_limit: Optional[float] = None,
                 frame_sink: Optional[Callable[[int, BinaryImage], None]] = None) -> SimTrace:
    """Fixed-step closed loop: render -> perceive -> fuse -> steer -> move.

    Vision runs every round(1 / (vision_rate * dt)) steps, the IMU every
    round(1 / (imu_rate * dt)) steps; the controller runs every step on the
    most recent feedback. ``steer_bias`` is added to the commanded angle at
    the actuator. The run stops early with status VehicleLeftRoad once
    |offset| exceeds ``departure_limit`` (half a lane width by default), or
    RoadEnd when the camera window would run past the end of the road.
    """
    if not 1e-4 <= dt <= 0.1:
        raise ValueError("dt must lie in [1e-4, 0.1]")
    if duration <= 0:
        raise ValueError("duration must be > 0")
    for seg in road.segments:
        if isinstance(seg, Arc) and seg.radius <= wheelbase:
            raise ValueError("arc radius must exceed the wheelbase")
    if perception is None:
        perception = PerceptionConfig(lane_width_px=road.lane_width * cam.px_per_m)
    limit = road.lane_width / 2.0 if departure_limit is None else departure_limit
    rng = np.random.default_rng(noise.rng_seed)

    state = pose_at(road, start_s, initial_offset, initial_heading, v)
    ctrl = ControllerState()
    fb: Optional[FeedbackSample] = None
    lanes = LanesSeen.NONE.value
    every_vision = _every(fusion.vision_rate, dt)
    every_imu = _every(fusion.imu_rate, dt)
    n_steps = int(round(duration / dt))
    trace = SimTrace(dt=dt)
    hint = start_s
    steer_lim = 0.5 * math.pi - 1e-3
    for k in range(n_steps):
        t = k * dt
        try:
            lat = lateral_state(road, state, hint)
        except OffRoad:
            trace.status = VEHICLE_LEFT_ROAD
            break
        hint = lat.arclength
        if abs(lat.offset) > limit:
            trace.status = VEHICLE_LEFT_ROAD
            break
        if lat.arclength + cam.mount_offset + cam.view_length >= road.total_length:
            trace.status = ROAD_END
            break

        vision_alpha = None
        if k % every_vision == 0:
            img = render_camera(road, state, cam, noise, rng, hint)
            if frame_sink is not None:
                frame_sink(k, img)
            try:
                fb = process_frame(img, perception).feedback
                vision_alpha = fb.angle_error_alpha
                lanes = fb.lanes_seen.value
            except NoLanesVisible:
                lanes = LanesSeen.NONE.value
        imu = None
        if k % every_imu == 0:
            # the IMU reads heading relative to the road; alpha has the opposite sign
            imu = -imu_sample(lat.heading_rel_road, noise, rng)

        if vision_alpha is None and imu is None:
            fused = ctrl.last_fused_heading
        else:
            fused, ctrl = fuse_heading(ctrl, imu, vision_alpha, fusion, t)
        if fb is None:
            delta = 0.0
        else:
            delta, ctrl = steering_command(fb, fused, ctrl, gains, dt)
        trace.rows.append(TraceRow(t, lat.offset, fb.distance_error if fb else 0.0, fused, delta, lanes))
        applied = max(-steer_lim, min(steer_lim, delta + steer_bias))
        state = kinematic_step(state, applied, dt, wheelbase)
    return trace


def curve_straight_curve(lane_width: float = 0.4, line_thickness: float = 0.0225,
                         radius: float = 2.0) -> RoadModel:
    """Track used for the midline-distance scenarios: curve, long straight, curve."""
    return RoadModel(
        (Straight(2.0), Arc(radius, math.pi / 2), Straight(9.0), Arc(radius, -math.pi / 2), Straight(12.0)),
        lane_width, line_thickness)
