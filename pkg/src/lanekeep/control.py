"""Three-term lateral controller with two-rate heading fusion.

steering = k_distance * e_d + k_integral * integral(e_d) + k_angle * tan(alpha)

where e_d is the pixel distance error of the ideal path and alpha the fused
heading error in degrees. The vision angle arrives at a low rate; an IMU
heading sample arrives at a higher rate and carries the estimate between
vision frames.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional

from .perception import FeedbackSample


class NoHeadingSource(ValueError):
    pass


@dataclass(frozen=True)
class ControllerGains:
    k_distance: float = 0.006  # rad / px
    k_integral: float = 0.003  # rad / (px s)
    k_angle: float = 1.0  # rad, multiplies tan(alpha)
    delta_max: float = 0.45  # rad
    integral_clamp: float = 80.0  # px s
    alpha_clamp_deg: float = 85.0

    def __post_init__(self):
        if self.delta_max <= 0:
            raise ValueError("delta_max must be > 0")
        if self.integral_clamp < 0:
            raise ValueError("integral_clamp must be >= 0")
        if not 0 < self.alpha_clamp_deg < 90:
            raise ValueError("alpha_clamp_deg must lie in (0, 90)")

    @classmethod
    def zero(cls, **kw) -> "ControllerGains":
        return cls(k_distance=0.0, k_integral=0.0, k_angle=0.0, **kw)


@dataclass(frozen=True)
class ControllerState:
    integral_accum: float = 0.0  # px s
    last_fused_heading: float = 0.0  # deg
    last_vision_time: Optional[float] = None  # s
    last_imu_heading: Optional[float] = None  # deg


@dataclass(frozen=True)
class HeadingFusionConfig:
    vision_weight: float = 0.5
    imu_rate: float = 100.0  # Hz
    vision_rate: float = 20.0  # Hz

    def __post_init__(self):
        if not 0.0 <= self.vision_weight <= 1.0:
            raise ValueError("vision_weight must lie in [0, 1]")
        if not self.imu_rate >= self.vision_rate > 0:
            raise ValueError("need imu_rate >= vision_rate > 0")


def fuse_heading(state: ControllerState, imu_heading: Optional[float], vision_alpha: Optional[float],
                 cfg: HeadingFusionConfig, t: Optional[float] = None) -> tuple[float, ControllerState]:
    """Blend vision and IMU heading errors (degrees, same sign convention).

    With a vision sample the estimate is reset to the weighted blend (or to
    the vision value alone when the IMU is silent). Without one, the IMU
    change since its previous sample is added to the last estimate; the very
    first IMU-only sample is taken as-is.

    Returns:
        (fused heading in degrees, updated state)
    """
    if imu_heading is None and vision_alpha is None:
        raise NoHeadingSource("need a vision or an IMU heading sample")
    if vision_alpha is not None:
        if imu_heading is None:
            fused = vision_alpha
        else:
            w = cfg.vision_weight
            fused = w * vision_alpha + (1.0 - w) * imu_heading
        vision_time = t if t is not None else state.last_vision_time
    else:
        if state.last_imu_heading is None:
            fused = imu_heading
        else:
            fused = state.last_fused_heading + (imu_heading - state.last_imu_heading)
        vision_time = state.last_vision_time
    new_state = replace(
        state,
        last_fused_heading=fused,
        last_vision_time=vision_time,
        last_imu_heading=imu_heading if imu_heading is not None else state.last_imu_heading,
    )
    return fused, new_state


def _clamp(v: float, lim: float) -> float:
    return max(-lim, min(lim, v))


def steering_command(fb: FeedbackSample, fused_alpha: float, state: ControllerState,
                     gains: ControllerGains, dt: float) -> tuple[float, ControllerState]:
    """Steering angle in radians; positive steers toward the image right."""
    if dt <= 0:
        raise ValueError("dt must be > 0")
    alpha = _clamp(fused_alpha, gains.alpha_clamp_deg)
    integral = _clamp(state.integral_accum + fb.distance_error * dt, gains.integral_clamp)
    raw = (gains.k_distance * fb.distance_error
           + gains.k_integral * integral
           + gains.k_angle * math.tan(math.radians(alpha)))
    return _clamp(raw, gains.delta_max), replace(state, integral_accum=integral)


def reset(state: Optional[ControllerState] = None) -> ControllerState:
    return ControllerState()
