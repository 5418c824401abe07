from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..kvconfig import ConfigError

WEATHERS = ("clear", "fog", "rain", "snow")
TIMES = ("day", "night")
VOID_CLASS = 255
VOID_INSTANCE = 0

CLASS_NAMES = ("sky", "road", "sidewalk", "building", "vegetation", "pole", "car", "person")


@dataclass(frozen=True)
class ConditionLabel:
    weather: str
    time: str

    def __post_init__(self):
        if self.weather not in WEATHERS or self.time not in TIMES:
            raise ValueError(f"invalid condition {self.weather}/{self.time}")

    @property
    def index(self) -> int:
        """Class index in [0, 8): weather-major, then time."""
        return WEATHERS.index(self.weather) * len(TIMES) + TIMES.index(self.time)

    @classmethod
    def from_index(cls, i: int) -> "ConditionLabel":
        return cls(WEATHERS[i // len(TIMES)], TIMES[i % len(TIMES)])


@dataclass
class SparseDepthMap:
    depth: np.ndarray  # H x W metres, meaningful where valid
    valid: np.ndarray  # H x W bool
    intensity: np.ndarray | None = None  # optional per-return intensity proxy

    @property
    def valid_fraction(self) -> float:
        return float(self.valid.mean())


@dataclass
class PanopticMap:
    class_id: np.ndarray  # H x W uint16, 255 = void
    instance_id: np.ndarray  # H x W uint16, 0 = void

    @property
    def void(self) -> np.ndarray:
        return self.class_id == VOID_CLASS


@dataclass
class MultimodalSample:
    rgb: np.ndarray
    lidar_raw: SparseDepthMap
    lidar_input: np.ndarray
    radar_input: np.ndarray
    event_input: np.ndarray
    panoptic: PanopticMap
    condition: ConditionLabel
    depth_true: np.ndarray
    seed: int = 0

    @property
    def hw(self) -> tuple[int, int]:
        return self.rgb.shape[1], self.rgb.shape[2]

    def modality(self, name: str) -> np.ndarray:
        return {
            "rgb": self.rgb,
            "lidar": self.lidar_input,
            "radar": self.radar_input,
            "event": self.event_input,
        }[name]


@dataclass(frozen=True)
class SceneConfig:
    height: int = 64
    width: int = 64
    n_objects_min: int = 4
    n_objects_max: int = 9
    n_classes: int = 8
    d_min: float = 1.0
    d_max: float = 80.0
    depth_jitter: float = 0.02  # relative bound of per-pixel depth jitter inside an object
    void_patches_max: int = 3
    lidar_row_step: int = 2
    # per weather, ordered as WEATHERS: clear, fog, rain, snow
    lidar_dropout_beta: tuple[float, ...] = (0.1, 0.6, 0.3, 0.5)
    lidar_noise_sigma: tuple[float, ...] = (0.01, 0.05, 0.03, 0.08)
    lidar_outlier_rate: tuple[float, ...] = (0.0, 0.12, 0.04, 0.10)
    radar_dropout: tuple[float, ...] = (0.1, 0.15, 0.15, 0.2)
    night_gain: float = 0.3
    fog_density: float = 0.06
    snow_fog_density: float = 0.02
    k_lidar: int = 5
    k_event: int = 3
    k_radar: int = 9
    event_threshold: float = 0.04
    seed: int = 0
    stride_multiple: int = 32
    n_train: int = 200
    n_val: int = 40
    n_test: int = 40

    def __post_init__(self):
        if self.d_min <= 0 or self.d_max <= self.d_min:
            raise ConfigError("need 0 < d_min < d_max")
        if self.height % self.stride_multiple or self.width % self.stride_multiple:
            raise ConfigError(
                f"height/width must be divisible by {self.stride_multiple}"
            )
        for k in (self.k_lidar, self.k_event, self.k_radar):
            if k < 1 or k % 2 == 0:
                raise ConfigError("sensor dilation kernels must be odd and >= 1")
        for name in ("lidar_dropout_beta", "lidar_noise_sigma", "lidar_outlier_rate", "radar_dropout"):
            if len(getattr(self, name)) != len(WEATHERS):
                raise ConfigError(f"{name} needs one value per weather {WEATHERS}")
        if self.n_objects_min < 0 or self.n_objects_max < self.n_objects_min:
            raise ConfigError("bad object count range")
        if self.n_classes != len(CLASS_NAMES):
            raise ConfigError(f"the generator draws exactly {len(CLASS_NAMES)} classes")

    def weather_param(self, name: str, weather: str) -> float:
        return getattr(self, name)[WEATHERS.index(weather)]
