"""Parallel parking: sign-distance model, side-scan mapping, gap detection and
two-arc maneuver planning checked by bicycle-model rollout.

Parking frame: x runs along the road in the driving direction; the parking
lane occupies 0 <= y <= lane depth with the curb at its far edge, so +y is
the side the range sensor faces. The vehicle reference point is the rear
axle; footprints assume equal front and rear overhangs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from .simulator import VehicleState, kinematic_step, wrap_angle

SENTINEL_MM = 2000.0


class DegenerateSamples(ValueError):
    pass


class HeightBelowAsymptote(ValueError):
    pass


class SpaceTooSmall(ValueError):
    pass


class NoExitFound(RuntimeError):
    pass


# --- sign distance -------------------------------------------------------------

@dataclass(frozen=True)
class SignHeightSample:
    pixel_height: float
    true_distance: float

    def __post_init__(self):
        if not (self.pixel_height > 0 and self.true_distance > 0):
            raise ValueError("pixel_height and true_distance must be > 0")


@dataclass(frozen=True)
class DistanceModel:
    """Apparent sign height h(d) = a / d + b."""

    a: float
    b: float
    fitted_range: tuple[float, float]

    def height(self, d):
        return self.a / np.asarray(d, dtype=float) + self.b


@dataclass(frozen=True)
class DistanceEstimate:
    distance: float
    clamped: bool


def fit_sign_distance_model(samples: Sequence[SignHeightSample]) -> DistanceModel:
    """Least-squares fit of h = a / d + b (linear in 1/d)."""
    if len(samples) < 3:
        raise DegenerateSamples(f"need >= 3 samples, got {len(samples)}")
    d = np.array([s.true_distance for s in samples], dtype=float)
    h = np.array([s.pixel_height for s in samples], dtype=float)
    if len(np.unique(d)) < 3:
        raise DegenerateSamples("need >= 3 distinct distances")
    design = np.column_stack([1.0 / d, np.ones_like(d)])
    (a, b), *_ = np.linalg.lstsq(design, h, rcond=None)
    if not a > 0:
        raise DegenerateSamples(f"fit gives non-decreasing model (a = {a:.4g})")
    return DistanceModel(float(a), float(b), (float(d.min()), float(d.max())))


def estimate_distance(m: DistanceModel, pixel_height: float) -> DistanceEstimate:
    """Invert the height model; results outside the fitted range are clamped."""
    if pixel_height <= m.b:
        raise HeightBelowAsymptote(f"height {pixel_height} <= asymptote {m.b}")
    d = m.a / (pixel_height - m.b)
    lo, hi = m.fitted_range
    if d < lo:
        return DistanceEstimate(lo, True)
    if d > hi:
        return DistanceEstimate(hi, True)
    return DistanceEstimate(d, False)


# --- side range scan -----------------------------------------------------------

@dataclass(frozen=True, eq=False)
class RangeScan:
    """Side-sensor readings (mm) against encoder odometry (m)."""

    odometry: np.ndarray
    ranges: np.ndarray
    out_of_range_value: float = SENTINEL_MM

    def __post_init__(self):
        odo = np.asarray(self.odometry, dtype=float).copy()
        rng = np.asarray(self.ranges, dtype=float).copy()
        if odo.shape != rng.shape or odo.ndim != 1:
            raise ValueError("odometry and ranges must be equal-length 1-D arrays")
        if np.any(np.diff(odo) < 0):
            raise ValueError("odometry must be non-decreasing")
        if np.any(rng <= 0) or np.any(rng > self.out_of_range_value):
            raise ValueError(f"ranges must lie in (0, {self.out_of_range_value}]")
        odo.setflags(write=False)
        rng.setflags(write=False)
        object.__setattr__(self, "odometry", odo)
        object.__setattr__(self, "ranges", rng)

    def __len__(self):
        return len(self.ranges)

    def __eq__(self, other):
        return (isinstance(other, RangeScan) and np.array_equal(self.odometry, other.odometry)
                and np.array_equal(self.ranges, other.ranges))

    __hash__ = None

    def to_csv(self) -> str:
        lines = ["odometry_m,range_mm"]
        lines += [f"{o!r},{r!r}" for o, r in zip(self.odometry.tolist(), self.ranges.tolist())]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, text: str) -> "RangeScan":
        rows = [ln for ln in text.splitlines() if ln.strip()]
        if not rows or rows[0].strip() != "odometry_m,range_mm":
            raise ValueError("scan CSV must start with header odometry_m,range_mm")
        pairs = [ln.split(",") for ln in rows[1:]]
        return cls(np.array([float(p[0]) for p in pairs]), np.array([float(p[1]) for p in pairs]))


def _is_spike(r: np.ndarray, i: int, j: int, thr: float) -> bool:
    """Samples i..j-1 form a spike between flanks i-1 and j."""
    left, right = r[i - 1], r[j]
    if abs(left - right) > thr:
        return False
    run = r[i:j]
    return bool(np.all(np.abs(run - left) > thr) and np.all(np.abs(run - right) > thr))


def _sweep(r: np.ndarray, odo: np.ndarray, max_spike_run: int, thr: float) -> bool:
    """One left-to-right pass in place; returns whether anything changed."""
    n = len(r)
    changed = False
    i = 1
    while i < n - 1:
        for length in range(1, max_spike_run + 1):
            j = i + length
            if j >= n:
                break
            if _is_spike(r, i, j, thr):
                s0, s1 = odo[i - 1], odo[j]
                if s1 > s0:
                    frac = (odo[i:j] - s0) / (s1 - s0)
                else:
                    frac = np.arange(1, length + 1) / (length + 1)
                r[i:j] = r[i - 1] + frac * (r[j] - r[i - 1])
                changed = True
                i = j - 1
                break
        i += 1
    return changed


def interpolate_scan(scan: RangeScan, max_spike_run: int = 2, spike_threshold: float = 300.0) -> RangeScan:
    """Replace short spurious runs by linear interpolation between their flanks.

    A run of at most ``max_spike_run`` samples is a spike when every sample
    differs from both flanking samples by more than ``spike_threshold`` and
    the two flanks agree with each other within that threshold. The scan is
    swept left to right, taking the shortest spike at each position, and the
    sweep repeats until nothing changes, since a repair can expose a new
    spike next to it. Longer excursions (real obstacles, gap edges) are kept.
    The 2000 mm sentinel is an ordinary value here, so isolated echoes inside
    a free gap vanish.
    """
    if len(scan) == 0:
        raise ValueError("scan is empty")
    if max_spike_run < 1:
        raise ValueError("max_spike_run must be >= 1")
    r = scan.ranges.astype(float)
    # every change pulls samples within the threshold of a neighbour; the cap is a safeguard
    for _ in range(len(r) + 1):
        if not _sweep(r, scan.odometry, max_spike_run, spike_threshold):
            break
    return RangeScan(scan.odometry, r, scan.out_of_range_value)


@dataclass(frozen=True)
class ParkingSpace:
    start_s: float
    end_s: float
    depth: float  # m, nearest reading inside the gap, measured from the sensor

    def __post_init__(self):
        if not self.end_s > self.start_s:
            raise ValueError("end_s must exceed start_s")
        if not self.depth > 0:
            raise ValueError("depth must be > 0")

    @property
    def length(self) -> float:
        return self.end_s - self.start_s


def detect_space(scan: RangeScan, min_length: float, min_depth_mm: float) -> Optional[ParkingSpace]:
    """First run of readings >= min_depth_mm spanning at least min_length metres.

    Returns None when no such run exists.
    """
    deep = scan.ranges >= min_depth_mm
    n = len(deep)
    i = 0
    while i < n:
        if not deep[i]:
            i += 1
            continue
        j = i
        while j + 1 < n and deep[j + 1]:
            j += 1
        span = scan.odometry[j] - scan.odometry[i]
        if span >= min_length and span > 0:
            depth_mm = min(float(scan.ranges[i:j + 1].min()), scan.out_of_range_value)
            return ParkingSpace(float(scan.odometry[i]), float(scan.odometry[j]), depth_mm / 1000.0)
        i = j + 1
    return None


@dataclass(frozen=True)
class Rect:
    """Axis-aligned rectangle in the parking frame."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float


def simulate_scan(obstacles: Iterable[Rect], sensor_y: float, s_start: float, s_end: float,
                  spacing: float = 0.01, max_range_mm: float = SENTINEL_MM) -> RangeScan:
    """Ideal side-sensor pass: rays toward +y from (s, sensor_y)."""
    s = np.round(np.arange(s_start, s_end + 0.5 * spacing, spacing), 9)
    ranges = np.full(s.shape, max_range_mm)
    for ob in obstacles:
        hit = (s >= ob.x_min) & (s <= ob.x_max) & (ob.y_min >= sensor_y)
        dist = (ob.y_min - sensor_y) * 1000.0
        ranges = np.where(hit, np.minimum(ranges, dist), ranges)
    ranges = np.clip(ranges, 1.0, max_range_mm)
    return RangeScan(s, ranges, max_range_mm)


# --- geometry ------------------------------------------------------------------

@dataclass(frozen=True)
class VehicleParams:
    wheelbase: float = 0.26
    length: float = 0.40
    width: float = 0.19
    delta_max: float = 0.45

    def __post_init__(self):
        if not 0 < self.wheelbase < self.length:
            raise ValueError("need 0 < wheelbase < length")
        if self.width <= 0:
            raise ValueError("width must be > 0")
        if not 0 < self.delta_max < math.pi / 2:
            raise ValueError("delta_max must lie in (0, pi/2)")

    @property
    def overhang(self) -> float:
        return 0.5 * (self.length - self.wheelbase)

    @property
    def turning_radius(self) -> float:
        return self.wheelbase / math.tan(self.delta_max)


def footprint_center(pose: VehicleState, vehicle: VehicleParams) -> VehicleState:
    """Geometric center of the body for a rear-axle pose."""
    c = 0.5 * vehicle.wheelbase
    return VehicleState(pose.x + c * math.cos(pose.heading), pose.y + c * math.sin(pose.heading),
                        pose.heading, pose.speed)


def _corners(pose: VehicleState, length: float, width: float) -> np.ndarray:
    c, s = math.cos(pose.heading), math.sin(pose.heading)
    hl, hw = 0.5 * length, 0.5 * width
    local = np.array([[hl, hw], [hl, -hw], [-hl, -hw], [-hl, hw]])
    return np.column_stack([pose.x + local[:, 0] * c - local[:, 1] * s,
                            pose.y + local[:, 0] * s + local[:, 1] * c])


def check_collision(pose: VehicleState, footprint: tuple[float, float], obstacles: Iterable[Rect]) -> bool:
    """Separating-axis test of an oriented rectangle against axis-aligned ones.

    ``pose`` gives the rectangle's center and heading; ``footprint`` is
    (length along heading, width). Touching boundaries do not collide.
    """
    corners = _corners(pose, footprint[0], footprint[1])
    c, s = math.cos(pose.heading), math.sin(pose.heading)
    axes = ((c, s), (-s, c))
    half = (0.5 * footprint[0], 0.5 * footprint[1])
    cmin, cmax = corners.min(axis=0), corners.max(axis=0)
    for ob in obstacles:
        if cmax[0] <= ob.x_min or cmin[0] >= ob.x_max or cmax[1] <= ob.y_min or cmin[1] >= ob.y_max:
            continue
        box = np.array([[ob.x_min, ob.y_min], [ob.x_max, ob.y_min], [ob.x_max, ob.y_max], [ob.x_min, ob.y_max]])
        separated = False
        for (ax, ay), h in zip(axes, half):
            centre = pose.x * ax + pose.y * ay
            proj = box[:, 0] * ax + box[:, 1] * ay
            if proj.max() <= centre - h or proj.min() >= centre + h:
                separated = True
                break
        if not separated:
            return True
    return False


# --- maneuvers -----------------------------------------------------------------

@dataclass(frozen=True)
class ManeuverSegment:
    speed: float  # m/s, negative reverses
    delta: float  # rad
    duration: float  # s


@dataclass(frozen=True)
class ManeuverPlan:
    segments: tuple
    expected_final_pose: VehicleState

    def to_json(self) -> dict:
        return {
            "segments": [{"speed": g.speed, "delta": g.delta, "duration": g.duration} for g in self.segments],
            "expected_final_pose": {"x": self.expected_final_pose.x, "y": self.expected_final_pose.y,
                                    "heading": self.expected_final_pose.heading},
        }


def rollout(start: VehicleState, plan: ManeuverPlan | Sequence[ManeuverSegment], vehicle: VehicleParams,
            dt: float = 2e-3) -> list[VehicleState]:
    """Forward-simulate a plan through the bicycle model; returns every pose."""
    segments = plan.segments if isinstance(plan, ManeuverPlan) else plan
    poses = [start]
    pose = start
    for seg in segments:
        n_full = int(seg.duration // dt)
        rest = seg.duration - n_full * dt
        for _ in range(n_full):
            pose = kinematic_step(pose, seg.delta, dt, vehicle.wheelbase, seg.speed)
            poses.append(pose)
        if rest > 1e-12:
            pose = kinematic_step(pose, seg.delta, rest, vehicle.wheelbase, seg.speed)
            poses.append(pose)
    return poses


def first_collision(poses: Sequence[VehicleState], vehicle: VehicleParams, obstacles: Sequence[Rect],
                    inflate: float = 0.0) -> Optional[int]:
    fp = (vehicle.length + 2 * inflate, vehicle.width + 2 * inflate)
    for k, p in enumerate(poses):
        if check_collision(footprint_center(p, vehicle), fp, obstacles):
            return k
    return None


def space_obstacles(space: ParkingSpace, lateral_gap: float, obstacle_length: float = 1.0,
                    curb_thickness: float = 0.05) -> list[Rect]:
    """Rear car, front car and curb bounding a detected space."""
    lane_depth = space.depth - lateral_gap
    return [
        Rect(space.start_s - obstacle_length, 0.0, space.start_s, lane_depth),
        Rect(space.end_s, 0.0, space.end_s + obstacle_length, lane_depth),
        Rect(space.start_s - obstacle_length, lane_depth, space.end_s + obstacle_length,
             lane_depth + curb_thickness),
    ]


def _park_in_geometry(vehicle: VehicleParams, lateral_gap: float, margin: float):
    r = vehicle.turning_radius
    y_start = -lateral_gap - 0.5 * vehicle.width
    y_final = 0.5 * vehicle.width + margin
    shift = y_final - y_start
    if shift > 2.0 * r:
        raise SpaceTooSmall("lateral shift exceeds what two arcs can provide")
    phi = math.acos(1.0 - shift / (2.0 * r))
    return r, y_start, y_final, phi


def min_space_length(vehicle: VehicleParams, lateral_gap: float, margin: float = 0.02) -> float:
    """Shortest gap for the two-arc maneuver.

    The second arc turns about a center R to the driving side of the final
    rear axle; every body point stays within the distance of the far front
    corner from that center, so the front car's near corner must sit outside
    that circle. Margins are kept at both ends.
    """
    r, _, y_final, _ = _park_in_geometry(vehicle, lateral_gap, margin)
    reach = vehicle.wheelbase + vehicle.overhang
    rho2 = reach ** 2 + (r + 0.5 * vehicle.width) ** 2
    return 2.0 * margin + vehicle.overhang + math.sqrt(rho2 - (r - y_final) ** 2)


def plan_park_in(space: ParkingSpace, vehicle: VehicleParams, lateral_gap: float = 0.1,
                 margin: float = 0.02, speed: float = 0.2) -> ManeuverPlan:
    """Reverse two equal max-steer arcs into the gap, then center forward.

    The plan starts from the driving pose (heading 0, side at -lateral_gap)
    whose rear-axle x is returned implicitly by ``park_in_start``.

    Raises:
        SpaceTooSmall: gap shorter than ``min_space_length`` or too shallow.
    """
    r, y_start, y_final, phi = _park_in_geometry(vehicle, lateral_gap, margin)
    lane_depth = space.depth - lateral_gap
    if lane_depth < vehicle.width + 2.0 * margin:
        raise SpaceTooSmall(f"lane depth {lane_depth:.3f} m too shallow")
    need = min_space_length(vehicle, lateral_gap, margin)
    if space.length < need - 1e-12:
        raise SpaceTooSmall(f"gap {space.length:.3f} m < minimum {need:.3f} m")

    x_final = space.start_s + margin + vehicle.overhang
    x_start = x_final + 2.0 * r * math.sin(phi)
    arc_time = r * phi / speed
    segments = [ManeuverSegment(-speed, vehicle.delta_max, arc_time),
                ManeuverSegment(-speed, -vehicle.delta_max, arc_time)]
    slack = 0.5 * (space.length - vehicle.length) - margin
    if slack > 1e-3:
        segments.append(ManeuverSegment(speed, 0.0, slack / speed))
        x_final += slack
    plan = ManeuverPlan(tuple(segments), VehicleState(x_final, y_final, 0.0))

    start = VehicleState(x_start, y_start, 0.0)
    poses = rollout(start, plan, vehicle)
    if first_collision(poses, vehicle, space_obstacles(space, lateral_gap)) is not None:
        raise SpaceTooSmall("rollout of the two-arc maneuver collides")
    return plan


def park_in_start(space: ParkingSpace, vehicle: VehicleParams, lateral_gap: float = 0.1,
                  margin: float = 0.02) -> VehicleState:
    """Driving-lane pose from which ``plan_park_in`` begins."""
    r, y_start, _, phi = _park_in_geometry(vehicle, lateral_gap, margin)
    return VehicleState(space.start_s + margin + vehicle.overhang + 2.0 * r * math.sin(phi), y_start, 0.0)


def _exited(pose: VehicleState, vehicle: VehicleParams) -> bool:
    return bool(np.all(_corners(footprint_center(pose, vehicle), vehicle.length, vehicle.width)[:, 1] < 0.0))


def _advance(pose: VehicleState, speed: float, delta: float, vehicle: VehicleParams, obstacles,
             max_angle: float, clearance: float, dt: float, stop_when_exited: bool):
    """Drive one max-steer arc until blocked, exited or ``max_angle`` turned.

    Returns (travel time before the inflated body would touch, exited flag).
    """
    fp = (vehicle.length + 2 * clearance, vehicle.width + 2 * clearance)
    t = 0.0
    turned = 0.0
    p = pose
    while turned < max_angle:
        q = kinematic_step(p, delta, dt, vehicle.wheelbase, speed)
        if check_collision(footprint_center(q, vehicle), fp, obstacles):
            return t, False
        turned += abs(wrap_angle(q.heading - p.heading))
        t += dt
        p = q
        if stop_when_exited and _exited(p, vehicle):
            return t, True
    return t, False


def plan_park_out(space: ParkingSpace, current: VehicleState, front_clearance: float,
                  vehicle: VehicleParams = VehicleParams(), lateral_gap: float = 0.1,
                  max_segments: int = 12, speed: float = 0.2, clearance: float = 0.01,
                  dt: float = 2e-3) -> ManeuverPlan:
    """Leave a parallel slot forward toward the driving lane (-y).

    A single forward max-steer arc is used whenever it clears the car in
    front; otherwise reverse (+delta_max) and forward (-delta_max) shuffles
    alternate, each as long as the space allows, until that arc clears.

    Args:
        front_clearance: measured gap between front bumper and the car ahead.

    Raises:
        NoExitFound: the segment cap is reached or no shuffle makes progress.
    """
    front_x = current.x + vehicle.wheelbase + vehicle.overhang + front_clearance
    base = space_obstacles(space, lateral_gap)
    obstacles = [base[0], Rect(front_x, 0.0, front_x + 1.0, base[1].y_max), base[2]]
    delta = vehicle.delta_max
    segments: list[ManeuverSegment] = []
    pose = current
    while len(segments) < max_segments:
        t, exited = _advance(pose, speed, -delta, vehicle, obstacles, math.pi / 2, clearance, dt, True)
        if exited:
            segments.append(ManeuverSegment(speed, -delta, t))
            break
        if len(segments) + 1 >= max_segments:
            break
        reverse = not segments or segments[-1].speed > 0
        spd, dl = (-speed, delta) if reverse else (speed, -delta)
        t, _ = _advance(pose, spd, dl, vehicle, obstacles, math.pi / 2, clearance, dt, False)
        if t < 0.005:
            # blocked in this direction: try the other one, then give up
            spd, dl = (speed, -delta) if reverse else (-speed, delta)
            t, _ = _advance(pose, spd, dl, vehicle, obstacles, math.pi / 2, clearance, dt, False)
            if t < 0.005:
                break
        segments.append(ManeuverSegment(spd, dl, t))
        pose = rollout(pose, [segments[-1]], vehicle, dt)[-1]
    final = rollout(current, segments, vehicle, dt)[-1] if segments else current
    if not segments or not _exited(final, vehicle):
        raise NoExitFound(f"no exit within {max_segments} segments")
    return ManeuverPlan(tuple(segments), final)
