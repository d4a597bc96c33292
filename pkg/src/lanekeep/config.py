"""JSON scenario configuration with strict, path-reporting validation."""

from __future__ import annotations

import dataclasses
import enum
import json
import math
import os
import typing
from dataclasses import dataclass, field
from typing import Any, Optional, Union

from .control import ControllerGains, HeadingFusionConfig
from .parking import Rect, VehicleParams
from .perception import PerceptionConfig
from .simulator import Arc, CameraModel, NoiseModel, RoadModel, Straight, curve_straight_curve


class ConfigError(ValueError):
    """Invalid configuration; the message starts with the offending field path."""


@dataclass(frozen=True)
class SceneConfig:
    kind: str = "drive"  # "drive" follows the road; "sharp_turn" renders independent turn scenes
    frames: int = 10
    stride: float = 0.25  # m of road between drive frames

    def __post_init__(self):
        if self.kind not in ("drive", "sharp_turn"):
            raise ValueError("kind must be 'drive' or 'sharp_turn'")
        if self.frames < 1:
            raise ValueError("frames must be >= 1")
        if not self.stride > 0:
            raise ValueError("stride must be > 0")


@dataclass(frozen=True)
class StartConfig:
    arclength: float = 0.0
    offset: float = 0.0  # m
    heading: float = 0.0  # rad, relative to the road


@dataclass(frozen=True)
class ParkingConfig:
    obstacles: tuple = (Rect(-0.6, 0.0, 0.0, 0.2), Rect(0.8, 0.0, 1.4, 0.2))
    sensor_y: float = -0.15  # m, sensor position across the road (parking lane starts at 0)
    scan_start: float = -0.6
    scan_end: float = 1.4
    scan_spacing: float = 0.01
    spikes: tuple = ()  # odometry positions of injected spurious echoes
    spike_range_mm: float = 300.0
    min_length: float = 0.7
    min_depth_mm: float = 400.0
    max_spike_run: int = 2
    spike_threshold: float = 300.0
    margin: float = 0.02
    vehicle: VehicleParams = field(default_factory=VehicleParams)

    def __post_init__(self):
        if not self.scan_end > self.scan_start:
            raise ValueError("scan_end must exceed scan_start")
        if not self.scan_spacing > 0:
            raise ValueError("scan_spacing must be > 0")
        if self.sensor_y >= 0:
            raise ValueError("sensor_y must be < 0 (the sensor rides outside the parking lane)")
        if self.max_spike_run < 1:
            raise ValueError("max_spike_run must be >= 1")

    @property
    def lateral_gap(self) -> float:
        return -self.sensor_y


@dataclass(frozen=True)
class ScenarioConfig:
    road: RoadModel = field(default_factory=curve_straight_curve)
    camera: CameraModel = field(default_factory=lambda: CameraModel(mount_offset=0.2))
    noise: NoiseModel = field(default_factory=NoiseModel)
    gains: ControllerGains = field(default_factory=ControllerGains)
    fusion: HeadingFusionConfig = field(default_factory=HeadingFusionConfig)
    perception: Optional[PerceptionConfig] = None
    start: StartConfig = field(default_factory=StartConfig)
    scene: SceneConfig = field(default_factory=SceneConfig)
    parking: Optional[ParkingConfig] = None
    dt: float = 0.01
    duration: float = 50.0
    speed: float = 0.5
    wheelbase: float = 0.26
    steer_bias: float = 0.0
    rng_seed: int = 0

    def __post_init__(self):
        if not 1e-4 <= self.dt <= 0.1:
            raise ValueError("dt must lie in [1e-4, 0.1]")
        if not self.duration > 0:
            raise ValueError("duration must be > 0")
        if not self.wheelbase > 0:
            raise ValueError("wheelbase must be > 0")

    def perception_config(self) -> PerceptionConfig:
        if self.perception is not None:
            return self.perception
        return PerceptionConfig(lane_width_px=self.road.lane_width * self.camera.px_per_m)

    def with_seed(self, seed: Optional[int]) -> "ScenarioConfig":
        if seed is None:
            return self
        return dataclasses.replace(self, rng_seed=seed, noise=dataclasses.replace(self.noise, rng_seed=seed))


# --- decoding ------------------------------------------------------------------

def _fail(path: str, msg: str) -> ConfigError:
    return ConfigError(f"{path or '<root>'}: {msg}")


def _decode_number(value: Any, kind: type, path: str):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise _fail(path, f"expected a number, got {type(value).__name__}")
    if kind is int:
        if isinstance(value, float) and not value.is_integer():
            raise _fail(path, "expected an integer")
        return int(value)
    if not math.isfinite(value):
        raise _fail(path, "must be finite")
    return float(value)


def _decode_segment(value: Any, path: str):
    if not isinstance(value, dict):
        raise _fail(path, "segment must be an object")
    kind = value.get("type")
    if kind == "straight":
        cls = Straight
    elif kind == "arc":
        cls = Arc
    else:
        raise _fail(f"{path}.type", "must be 'straight' or 'arc'")
    return _decode_dataclass(cls, {k: v for k, v in value.items() if k != "type"}, path)


def _decode(tp: Any, value: Any, path: str):
    origin = typing.get_origin(tp)
    if origin is Union:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if value is None:
            return None
        return _decode(args[0], value, path)
    if dataclasses.is_dataclass(tp):
        return _decode_dataclass(tp, value, path)
    if isinstance(tp, type) and issubclass(tp, enum.Enum):
        try:
            return tp(value)
        except ValueError:
            raise _fail(path, f"must be one of {[e.value for e in tp]}") from None
    if tp is bool:
        if not isinstance(value, bool):
            raise _fail(path, "expected true or false")
        return value
    if tp in (int, float):
        return _decode_number(value, tp, path)
    if tp is str:
        if not isinstance(value, str):
            raise _fail(path, "expected a string")
        return value
    if origin is tuple:
        args = typing.get_args(tp)
        if not isinstance(value, list) or len(value) != len(args):
            raise _fail(path, f"expected a list of {len(args)} numbers")
        return tuple(_decode(a, v, f"{path}[{i}]") for i, (a, v) in enumerate(zip(args, value)))
    raise _fail(path, f"unsupported field type {tp!r}")


# element decoders for untyped tuple fields
_SEQUENCE_FIELDS = {
    (RoadModel, "segments"): _decode_segment,
    (ParkingConfig, "obstacles"): lambda v, p: _decode_dataclass(Rect, v, p),
    (ParkingConfig, "spikes"): lambda v, p: _decode_number(v, float, p),
}


def _decode_dataclass(cls, value: Any, path: str):
    if not isinstance(value, dict):
        raise _fail(path, f"expected an object for {cls.__name__}")
    hints = typing.get_type_hints(cls)
    fields = {f.name: f for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(value) - set(fields))
    if unknown:
        raise _fail(f"{path}.{unknown[0]}" if path else unknown[0], "unknown key")
    kwargs = {}
    for name, raw in value.items():
        sub = f"{path}.{name}" if path else name
        elem = _SEQUENCE_FIELDS.get((cls, name))
        if elem is not None:
            if not isinstance(raw, list):
                raise _fail(sub, "expected a list")
            kwargs[name] = tuple(elem(v, f"{sub}[{i}]") for i, v in enumerate(raw))
        else:
            kwargs[name] = _decode(hints[name], raw, sub)
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as exc:
        msg = str(exc)
        # point at the field when the validator names it
        for name in fields:
            if msg.startswith(name + " ") or msg.startswith(name + ":"):
                raise _fail(f"{path}.{name}" if path else name, msg) from None
        raise _fail(path, msg) from None


def _merge(base: Any, override: Any) -> Any:
    """Overlay ``override`` on ``base`` object-wise; lists and scalars replace."""
    if isinstance(base, dict) and isinstance(override, dict):
        out = dict(base)
        for k, v in override.items():
            out[k] = _merge(base[k], v) if k in base else v
        return out
    return override


def config_from_dict(data: Any) -> ScenarioConfig:
    """Decode a (possibly partial) configuration; missing fields keep their defaults."""
    if not isinstance(data, dict):
        raise _fail("", "configuration must be a JSON object")
    return _decode_dataclass(ScenarioConfig, _merge(config_to_dict(ScenarioConfig()), data), "")


def load_config(path: Union[str, os.PathLike]) -> ScenarioConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
    return config_from_dict(data)


# --- encoding ------------------------------------------------------------------

def _encode(value: Any):
    if isinstance(value, (Straight, Arc)):
        out = {"type": "straight" if isinstance(value, Straight) else "arc"}
        out.update(_encode_fields(value))
        return out
    if dataclasses.is_dataclass(value):
        return _encode_fields(value)
    if isinstance(value, enum.Enum):
        return value.value
    if isinstance(value, tuple):
        return [_encode(v) for v in value]
    return value


def _encode_fields(obj) -> dict:
    return {f.name: _encode(getattr(obj, f.name)) for f in dataclasses.fields(obj) if f.init}


def config_to_dict(cfg: ScenarioConfig) -> dict:
    return _encode(cfg)


__all__ = ["ConfigError", "SceneConfig", "StartConfig", "ParkingConfig", "ScenarioConfig", "config_from_dict",
           "config_to_dict", "load_config"]
