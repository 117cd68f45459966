"""
Domain models - enums and array-backed containers.

These models define:
- Network variants, forward modes and uncertainty kinds
- Cell classes of the occupancy grid
- Point clouds (radar detections, lidar reflections) as column arrays
- Ego poses and labeled scenes

Used by every service, the CLI and the REST layer.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Sequence

import numpy as np


class Variant(str, enum.Enum):
    """Where the network keeps distributions over its weights"""
    DETERMINISTIC = "deterministic"
    PROBABILISTIC = "probabilistic"
    HYBRID = "hybrid"
    MC_DROPOUT = "mc-dropout"


class ForwardMode(str, enum.Enum):
    """Forward pass with posterior means or with one sampled realization"""
    MEAN = "mean-weights"
    SAMPLE = "sample"


class UncertaintyKind(str, enum.Enum):
    EPISTEMIC = "epistemic"
    ALEATORIC = "aleatoric"


class CellClass(enum.IntEnum):
    """Per-cell class ids; the values are the label-grid encoding"""
    FREE = 0
    OCCUPIED = 1
    MOVING = 2
    UNKNOWN = 3


CLASS_NAMES: List[str] = [c.name.lower() for c in CellClass]
FEATURE_NAMES: List[str] = ["count", "doppler", "rcs", "t_rel"]


# ============================================================================
# Poses
# ============================================================================

@dataclass(frozen=True)
class EgoPose:
    """
    Rigid 2D pose of the ego vehicle in a common world frame.

    timestamp is in seconds; only differences between poses matter.
    """
    x: float = 0.0
    y: float = 0.0
    yaw: float = 0.0
    timestamp: float = 0.0

    def to_world(self, px: np.ndarray, py: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Map points from this ego frame into the world frame"""
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return c * px - s * py + self.x, s * px + c * py + self.y

    def from_world(self, wx: np.ndarray, wy: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Map world points into this ego frame"""
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        dx, dy = wx - self.x, wy - self.y
        return c * dx + s * dy, -s * dx + c * dy


# ============================================================================
# Point clouds
# ============================================================================

def _column(values: Iterable[float] | np.ndarray, dtype=np.float64) -> np.ndarray:
    return np.asarray(values, dtype=dtype).reshape(-1)


@dataclass
class DetectionCloud:
    """
    Radar detections stored column-wise.

    x, y in meters (ego frame), doppler in m/s, rcs in dBsm,
    t_rel in seconds before the reference time, sensor = mount index.
    """
    x: np.ndarray
    y: np.ndarray
    doppler: np.ndarray
    rcs: np.ndarray
    t_rel: np.ndarray
    sensor: np.ndarray

    def __post_init__(self):
        self.x = _column(self.x)
        self.y = _column(self.y)
        self.doppler = _column(self.doppler)
        self.rcs = _column(self.rcs)
        self.t_rel = _column(self.t_rel)
        self.sensor = _column(self.sensor, dtype=np.int64)
        n = len(self.x)
        if any(len(a) != n for a in (self.y, self.doppler, self.rcs, self.t_rel, self.sensor)):
            raise ValueError("detection columns differ in length")

    def __len__(self) -> int:
        return len(self.x)

    @classmethod
    def empty(cls) -> "DetectionCloud":
        return cls([], [], [], [], [], [])

    @classmethod
    def concat(cls, clouds: Sequence["DetectionCloud"]) -> "DetectionCloud":
        if not clouds:
            return cls.empty()
        return cls(
            np.concatenate([c.x for c in clouds]),
            np.concatenate([c.y for c in clouds]),
            np.concatenate([c.doppler for c in clouds]),
            np.concatenate([c.rcs for c in clouds]),
            np.concatenate([c.t_rel for c in clouds]),
            np.concatenate([c.sensor for c in clouds]),
        )

    def subset(self, index: np.ndarray) -> "DetectionCloud":
        return DetectionCloud(
            self.x[index], self.y[index], self.doppler[index],
            self.rcs[index], self.t_rel[index], self.sensor[index],
        )


@dataclass
class LidarCloud:
    """Labeled lidar reflections projected to x-y, stored column-wise"""
    x: np.ndarray
    y: np.ndarray
    cls: np.ndarray

    def __post_init__(self):
        self.x = _column(self.x)
        self.y = _column(self.y)
        self.cls = _column(self.cls, dtype=np.int64)
        if not len(self.x) == len(self.y) == len(self.cls):
            raise ValueError("lidar columns differ in length")

    def __len__(self) -> int:
        return len(self.x)

    @classmethod
    def empty(cls) -> "LidarCloud":
        return cls([], [], [])

    @classmethod
    def concat(cls, clouds: Sequence["LidarCloud"]) -> "LidarCloud":
        if not clouds:
            return cls.empty()
        return cls(
            np.concatenate([c.x for c in clouds]),
            np.concatenate([c.y for c in clouds]),
            np.concatenate([c.cls for c in clouds]),
        )


@dataclass(frozen=True)
class OODObject:
    """Object injected into test scenes only; absent from the ground truth"""
    x: float
    y: float
    radius: float
    tag: str


@dataclass
class LabeledScene:
    """
    One merged radar scan with its ground truth.

    Relationships:
    - detections: ego-motion compensated radar detections (reference frame)
    - lidar: labeled lidar reflections used to build `labels`
    - labels / weights: c_l x c_w label grid and observability grid
    """
    name: str
    detections: DetectionCloud
    lidar: LidarCloud
    poses: List[EgoPose]
    labels: np.ndarray
    weights: np.ndarray
    sensors: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    ood_objects: List[OODObject] = field(default_factory=list)

    @property
    def reference_pose(self) -> Optional[EgoPose]:
        return self.poses[-1] if self.poses else None
