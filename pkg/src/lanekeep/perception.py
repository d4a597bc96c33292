"""Lane landmark tracking on bird's-eye binary images.

Pipeline per frame: column histogram of the bottom band, smoothing
convolution, left/right base points, pear-ribbon density tracking of each
lane, quadratic x(y) fits, the averaged ideal path and finally the two
feedback signals (distance error in px, angle error in degrees) consumed by
the lateral controller.

The classical stacked sliding-window tracker is kept alongside as a baseline.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .imagecore import BinaryImage

ALPHA_CAP_DEG = 85.0


class EvenKernel(ValueError):
    pass


class InsufficientPoints(ValueError):
    pass


class NoLanesVisible(RuntimeError):
    pass


class Split(str, enum.Enum):
    AT_GLOBAL_PEAK = "AtGlobalPeak"
    AT_MIDPOINT = "AtMidpoint"


class Side(str, enum.Enum):
    LEFT = "Left"
    RIGHT = "Right"


class LanesSeen(str, enum.Enum):
    BOTH = "Both"
    LEFT_ONLY = "LeftOnly"
    RIGHT_ONLY = "RightOnly"
    NONE = "None"


@dataclass(frozen=True)
class RibbonConfig:
    """Geometry of the tracking agent.

    The ribbon is a pear-shaped oval made of two half-ellipses sharing the
    lateral axis: the half ahead of the center (smaller y) uses radii
    (lateral, front), the half behind uses (lateral, back). The capture
    square sits in the middle; the ribbon is the oval minus the square.
    """

    square_half_width: int = 6
    front_radius: float = 20.0
    lateral_radius: float = 14.0
    back_radius: float = 9.0
    step_cap: float = 12.0
    max_iterations: int = 60
    min_ribbon_pixels: int = 4
    forward_weight: float = 3.0

    def __post_init__(self):
        if not (self.front_radius >= self.lateral_radius >= self.back_radius > self.square_half_width):
            raise ValueError("need front >= lateral >= back > square_half_width")
        if self.square_half_width < 0:
            raise ValueError("square_half_width must be >= 0")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.forward_weight < 1:
            raise ValueError("forward_weight must be >= 1")
        if self.step_cap <= 0:
            raise ValueError("step_cap must be > 0")
        if self.min_ribbon_pixels < 1:
            raise ValueError("min_ribbon_pixels must be >= 1")


@dataclass(frozen=True)
class LanePixelCluster:
    points: np.ndarray  # (N, 2) int array of (x, y)
    side: Side

    def __len__(self):
        return len(self.points)


@dataclass(frozen=True)
class LanePolynomial:
    """x(y) = c2*y**2 + c1*y + c0 in pixel units."""

    coefficients: tuple[float, float, float]  # (c0, c1, c2)
    valid_y_range: tuple[float, float]

    def __post_init__(self):
        if not all(math.isfinite(c) for c in self.coefficients):
            raise ValueError("polynomial coefficients must be finite")
        if not self.valid_y_range[0] <= self.valid_y_range[1]:
            raise ValueError("valid_y_range must be (y_min, y_max) with y_min <= y_max")

    def __call__(self, y):
        c0, c1, c2 = self.coefficients
        y = np.asarray(y, dtype=float)
        return c2 * y * y + c1 * y + c0

    def slope(self, y):
        """dx/dy."""
        _, c1, c2 = self.coefficients
        return 2.0 * c2 * np.asarray(y, dtype=float) + c1


@dataclass(frozen=True)
class FeedbackSample:
    distance_error: float  # px, positive = path right of frame center
    angle_error_alpha: float  # deg, positive = path bends rightward going up-image
    lanes_seen: LanesSeen = LanesSeen.BOTH


@dataclass(frozen=True)
class BasePoints:
    left: Optional[int]
    right: Optional[int]


@dataclass(frozen=True)
class StepResult:
    next_center: Optional[tuple[float, float]]  # None means Terminate
    captured: np.ndarray  # (N, 2) int (x, y)


# --- base points ---------------------------------------------------------------

def column_histogram(img: BinaryImage, row_fraction: float = 1.0 / 3.0) -> np.ndarray:
    """Count true pixels per column over the bottom ceil(row_fraction * H) rows."""
    if not 0.0 < row_fraction <= 1.0:
        raise ValueError("row_fraction must lie in (0, 1]")
    rows = min(img.height, math.ceil(row_fraction * img.height - 1e-9))
    return img.data[img.height - rows:].sum(axis=0).astype(np.int64)


def box_kernel(width: int = 15) -> np.ndarray:
    if width < 1 or width % 2 == 0:
        raise EvenKernel(f"kernel width must be odd and >= 1, got {width}")
    return np.ones(width, dtype=float)


def convolve_histogram(h: Sequence[float], kernel: Sequence[float]) -> np.ndarray:
    """Same-length, zero-padded: out[i] = sum_j h[i + j - k] * kernel[j]."""
    kernel = np.asarray(kernel, dtype=float)
    if kernel.ndim != 1 or len(kernel) < 1 or len(kernel) % 2 == 0:
        raise EvenKernel(f"kernel length must be odd and >= 1, got {len(kernel)}")
    k = len(kernel) // 2
    padded = np.pad(np.asarray(h, dtype=float), k)
    return np.correlate(padded, kernel, mode="valid")


def _region_argmax(h: np.ndarray, lo: int, hi: int) -> Optional[int]:
    if hi <= lo:
        return None
    idx = lo + int(np.argmax(h[lo:hi]))
    return idx if h[idx] > 0 else None


def find_base_points(h: Sequence[float], split: Split = Split.AT_MIDPOINT) -> BasePoints:
    """Left/right lane seeds from a (smoothed) column histogram.

    AtGlobalPeak splits at the global maximum, excluding that bin from both
    sides; AtMidpoint splits at W // 2, which belongs to the right side.
    Ties resolve to the lowest index.
    """
    h = np.asarray(h, dtype=float)
    if h.size == 0:
        raise ValueError("histogram is empty")
    split = Split(split)
    if split is Split.AT_GLOBAL_PEAK:
        s = int(np.argmax(h))
        return BasePoints(_region_argmax(h, 0, s), _region_argmax(h, s + 1, len(h)))
    s = len(h) // 2
    return BasePoints(_region_argmax(h, 0, s), _region_argmax(h, s, len(h)))


# --- ribbon tracker ------------------------------------------------------------

def _as_mask(img) -> np.ndarray:
    return img.data if isinstance(img, BinaryImage) else np.asarray(img, dtype=bool)


def ribbon_step(img, center: tuple[float, float], cfg: RibbonConfig) -> StepResult:
    """One agent move: capture the square, steer by the ribbon centroid.

    Pixels ahead of the center (y < cy) count ``forward_weight`` times in
    the centroid. The displacement is clamped to ``step_cap``. When the
    ribbon holds fewer than ``min_ribbon_pixels`` true pixels the agent
    terminates (``next_center`` is None).
    """
    mask = _as_mask(img)
    height, width = mask.shape
    cx, cy = float(center[0]), float(center[1])
    reach_x = cfg.lateral_radius
    x0 = max(0, math.ceil(cx - reach_x))
    x1 = min(width - 1, math.floor(cx + reach_x))
    y0 = max(0, math.ceil(cy - max(cfg.front_radius, cfg.square_half_width)))
    y1 = min(height - 1, math.floor(cy + max(cfg.back_radius, cfg.square_half_width)))
    if x0 > x1 or y0 > y1:
        return StepResult(None, np.empty((0, 2), dtype=np.int64))

    ys, xs = np.nonzero(mask[y0:y1 + 1, x0:x1 + 1])
    xs = xs + x0
    ys = ys + y0
    dx = xs - cx
    dy = ys - cy

    hw = cfg.square_half_width
    in_square = (np.abs(dx) <= hw) & (np.abs(dy) <= hw)
    captured = np.column_stack([xs[in_square], ys[in_square]]).astype(np.int64)

    ahead = dy < 0
    radial = np.where(ahead, cfg.front_radius, cfg.back_radius)
    in_oval = (dx / cfg.lateral_radius) ** 2 + (dy / radial) ** 2 <= 1.0
    ribbon = in_oval & ~in_square
    n = int(np.count_nonzero(ribbon))
    if n < cfg.min_ribbon_pixels:
        return StepResult(None, captured)

    w = np.where(ahead[ribbon], cfg.forward_weight, 1.0)
    mx = float(np.dot(w, xs[ribbon]) / w.sum())
    my = float(np.dot(w, ys[ribbon]) / w.sum())
    ddx, ddy = mx - cx, my - cy
    dist = math.hypot(ddx, ddy)
    if dist > cfg.step_cap:
        ddx *= cfg.step_cap / dist
        ddy *= cfg.step_cap / dist
    return StepResult((cx + ddx, cy + ddy), captured)


def track_lane(img, base: int, cfg: RibbonConfig, side: Side = Side.LEFT,
               claimed: Optional[np.ndarray] = None) -> LanePixelCluster:
    """Follow one lane upward from its base column.

    Args:
        img: binary bird's-eye image.
        base: starting column (0 <= base < width).
        cfg: agent geometry.
        side: label stored on the returned cluster.
        claimed: optional boolean mask of pixels already owned by another
            lane; those pixels are invisible to this tracker.

    Pixels this tracker has already captured are hidden from its later
    steps, so the ring centroid is pulled only toward unvisited line pixels
    and the agent keeps moving when the line turns sideways.
    """
    mask = _as_mask(img)
    height, width = mask.shape
    if not 0 <= base < width:
        raise ValueError(f"base column {base} outside [0, {width})")
    if claimed is not None:
        mask = mask & ~claimed

    center = (float(base), float(height - 1 - cfg.square_half_width))
    centers = [center]
    taken = np.zeros_like(mask)
    for _ in range(cfg.max_iterations):
        res = ribbon_step(mask & ~taken, center, cfg)
        if len(res.captured):
            taken[res.captured[:, 1], res.captured[:, 0]] = True
        nxt = res.next_center
        if nxt is None:
            break
        if not (0 <= nxt[0] <= width - 1 and 0 <= nxt[1] <= height - 1):
            break
        if any(math.hypot(nxt[0] - px, nxt[1] - py) <= 1.0 for px, py in centers):
            break
        centers.append(nxt)
        center = nxt
    ys, xs = np.nonzero(taken)
    return LanePixelCluster(np.column_stack([xs, ys]).astype(np.int64), Side(side))


def track_lanes(img: BinaryImage, bases: BasePoints, cfg: RibbonConfig
                ) -> tuple[Optional[LanePixelCluster], Optional[LanePixelCluster]]:
    """Track left then right lane with a shared claim mask."""
    claimed = np.zeros((img.height, img.width), dtype=bool)
    left = right = None
    if bases.left is not None:
        left = track_lane(img, bases.left, cfg, Side.LEFT, claimed)
        claimed[left.points[:, 1], left.points[:, 0]] = True
    if bases.right is not None:
        right = track_lane(img, bases.right, cfg, Side.RIGHT, claimed)
    return left, right


def sliding_window_track(img, base: int, window: tuple[int, int], n_windows: int,
                         side: Side = Side.LEFT) -> LanePixelCluster:
    """Classical stacked-window tracker that only ever recenters along x.

    Windows occupy fixed horizontal strips of height ceil(H / n_windows),
    bottom to top. Each window is centered on the x-mean of the true pixels
    found in the window below it (kept when that window was empty). The
    window's own height argument is ignored in favor of the strip height.
    """
    if n_windows < 1:
        raise ValueError("n_windows must be >= 1")
    mask = _as_mask(img)
    height, width = mask.shape
    win_w = int(window[0])
    strip = math.ceil(height / n_windows)
    xc = float(base)
    chunks = []
    for i in range(n_windows):
        y_hi = height - i * strip
        y_lo = max(0, y_hi - strip)
        if y_hi <= 0:
            break
        x_lo = max(0, math.ceil(xc - win_w / 2.0))
        x_hi = min(width, math.ceil(xc + win_w / 2.0))
        if x_hi <= x_lo:
            continue
        ys, xs = np.nonzero(mask[y_lo:y_hi, x_lo:x_hi])
        if len(xs):
            xs = xs + x_lo
            ys = ys + y_lo
            chunks.append(np.column_stack([xs, ys]))
            xc = float(xs.mean())
    pts = np.concatenate(chunks) if chunks else np.empty((0, 2))
    return LanePixelCluster(pts.astype(np.int64), Side(side))


# --- curve fitting -------------------------------------------------------------

def fit_polynomial(cluster: LanePixelCluster, degree: int = 2) -> LanePolynomial:
    """Least-squares x(y) quadratic through the cluster points."""
    if degree != 2:
        raise ValueError("only degree 2 is supported")
    pts = np.asarray(cluster.points, dtype=float).reshape(-1, 2)
    if len(pts) < degree + 1 or len(np.unique(pts[:, 1])) < degree + 1:
        raise InsufficientPoints(
            f"need >= {degree + 1} points with distinct y, got {len(pts)} points")
    x, y = pts[:, 0], pts[:, 1]
    # centered and scaled y keeps the design matrix well conditioned
    y_mid = 0.5 * (y.min() + y.max())
    y_scale = max(0.5 * (y.max() - y.min()), 1.0)
    t = (y - y_mid) / y_scale
    design = np.column_stack([np.ones_like(t), t, t * t])
    (b0, b1, b2), *_ = np.linalg.lstsq(design, x, rcond=None)
    # back to powers of y
    c2 = b2 / y_scale ** 2
    c1 = b1 / y_scale - 2.0 * b2 * y_mid / y_scale ** 2
    c0 = b0 - b1 * y_mid / y_scale + b2 * y_mid ** 2 / y_scale ** 2
    return LanePolynomial((float(c0), float(c1), float(c2)), (float(y.min()), float(y.max())))


def ideal_path(left: Optional[LanePolynomial], right: Optional[LanePolynomial],
               lane_width: float) -> LanePolynomial:
    """Average of both lane fits, or one lane shifted by half a lane width."""
    if left is None and right is None:
        raise NoLanesVisible("neither lane is available")
    if left is not None and right is not None:
        coeffs = tuple(0.5 * (a + b) for a, b in zip(left.coefficients, right.coefficients))
        y_range = (min(left.valid_y_range[0], right.valid_y_range[0]),
                   max(left.valid_y_range[1], right.valid_y_range[1]))
        return LanePolynomial(coeffs, y_range)
    lane, shift = (left, lane_width / 2.0) if left is not None else (right, -lane_width / 2.0)
    c0, c1, c2 = lane.coefficients
    return LanePolynomial((c0 + shift, c1, c2), lane.valid_y_range)


def extract_feedback(ideal: LanePolynomial, frame_width: float,
                     lanes_seen: LanesSeen = LanesSeen.BOTH) -> FeedbackSample:
    """Distance and angle error at the bottommost valid point of the path."""
    y_b = ideal.valid_y_range[1]
    dist = float(ideal(y_b)) - frame_width / 2.0
    # up-image is "ahead" while y grows downward, hence the minus sign
    alpha = math.degrees(math.atan(-float(ideal.slope(y_b))))
    alpha = max(-ALPHA_CAP_DEG, min(ALPHA_CAP_DEG, alpha))
    return FeedbackSample(dist, alpha, LanesSeen(lanes_seen))


# --- full frame ----------------------------------------------------------------

@dataclass(frozen=True)
class PerceptionConfig:
    row_fraction: float = 1.0 / 3.0
    kernel_width: int = 15
    split: Split = Split.AT_MIDPOINT
    lane_width_px: float = 160.0
    min_cluster_points: int = 30
    ribbon: RibbonConfig = field(default_factory=RibbonConfig)

    def __post_init__(self):
        if not 0.0 < self.row_fraction <= 1.0:
            raise ValueError("row_fraction must lie in (0, 1]")
        if self.kernel_width < 1 or self.kernel_width % 2 == 0:
            raise EvenKernel("kernel_width must be odd and >= 1")
        if self.lane_width_px <= 0:
            raise ValueError("lane_width_px must be > 0")
        object.__setattr__(self, "split", Split(self.split))


@dataclass(frozen=True)
class FrameResult:
    bases: BasePoints
    left: Optional[LanePixelCluster]
    right: Optional[LanePixelCluster]
    left_poly: Optional[LanePolynomial]
    right_poly: Optional[LanePolynomial]
    ideal: LanePolynomial
    feedback: FeedbackSample


def _safe_fit(cluster: Optional[LanePixelCluster], min_points: int) -> Optional[LanePolynomial]:
    if cluster is None or len(cluster) < min_points:
        return None
    try:
        return fit_polynomial(cluster)
    except InsufficientPoints:
        return None


def process_frame(img: BinaryImage, cfg: PerceptionConfig = PerceptionConfig()) -> FrameResult:
    """Run the whole perception chain on one frame.

    The ideal path is evaluated at the image bottom row (the vehicle's
    position) even when the lane pixels stop short of it.

    Raises:
        NoLanesVisible: neither lane produced a usable fit.
    """
    hist = column_histogram(img, cfg.row_fraction)
    smooth = convolve_histogram(hist, box_kernel(cfg.kernel_width))
    bases = find_base_points(smooth, cfg.split)
    left, right = track_lanes(img, bases, cfg.ribbon)
    left_poly = _safe_fit(left, cfg.min_cluster_points)
    right_poly = _safe_fit(right, cfg.min_cluster_points)
    ideal = ideal_path(left_poly, right_poly, cfg.lane_width_px)
    ideal = replace(ideal, valid_y_range=(ideal.valid_y_range[0], float(img.height - 1)))
    if left_poly is not None and right_poly is not None:
        seen = LanesSeen.BOTH
    elif left_poly is not None:
        seen = LanesSeen.LEFT_ONLY
    else:
        seen = LanesSeen.RIGHT_ONLY
    fb = extract_feedback(ideal, img.width, seen)
    return FrameResult(bases, left, right, left_poly, right_poly, ideal, fb)
