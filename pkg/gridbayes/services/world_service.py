"""
World service - synthetic labeled scenes standing in for recorded drives.

A scene is a 2D world of rectangles and circles around the ego vehicle:
- walls and boxes: static, labeled occupied
- vehicles and pedestrians: moving, labeled moving
- optional OOD discs: seen by radar only, never part of the ground truth

The world frame is the ego frame at the reference (latest) time. The ego
drives at constant speed and turn rate over the concatenation window.

Pattern:
- sample_truth draws the geometry, render_scene ray-casts sensors against it
- generate_dataset writes a dataset directory via DatasetService
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from ..errors import ConfigurationError
from ..models import CellClass, DetectionCloud, EgoPose, LabeledScene, LidarCloud, OODObject
from ..schemas import DatasetManifest, LidarConfig, RadarConfig, RangeConfig, ScenarioConfig, SensorMount
from .dataset_service import DatasetService
from .scene_service import SceneService

logger = logging.getLogger(__name__)

VEHICLE_HALF_LENGTH = 2.25
VEHICLE_HALF_WIDTH = 0.9
PEDESTRIAN_RADIUS = 0.3
PLACEMENT_ATTEMPTS = 20
_TINY = 1e-12


# ============================================================================
# Geometry
# ============================================================================

@dataclass(frozen=True)
class Primitive:
    """
    Rectangle or circle with a constant velocity.

    x, y is the centre at the reference time; heading and the half extents
    apply to rectangles, radius to circles.
    """
    kind: str
    x: float
    y: float
    heading: float = 0.0
    half_length: float = 0.0
    half_width: float = 0.0
    radius: float = 0.0
    vx: float = 0.0
    vy: float = 0.0
    cls: CellClass = CellClass.OCCUPIED
    ood_tag: Optional[str] = None

    @property
    def bounding_radius(self) -> float:
        if self.kind == "circle":
            return self.radius
        return math.hypot(self.half_length, self.half_width)

    @property
    def speed(self) -> float:
        return math.hypot(self.vx, self.vy)

    def at(self, age: float) -> "Primitive":
        """The primitive `age` seconds before the reference time"""
        if self.vx == 0 and self.vy == 0:
            return self
        return replace(self, x=self.x - self.vx * age, y=self.y - self.vy * age)

    def intersect(self, origins: np.ndarray, directions: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """
        Entry and exit distance of each unit-direction ray.

        Rays starting inside the primitive enter at 0; misses give inf.
        """
        ox = origins[..., 0] - self.x
        oy = origins[..., 1] - self.y
        dx, dy = directions[:, 0], directions[:, 1]
        if self.kind == "circle":
            b = ox * dx + oy * dy
            c = ox * ox + oy * oy - self.radius ** 2
            disc = b * b - c
            root = np.sqrt(np.maximum(disc, 0.0))
            near, far = -b - root, -b + root
            hit = (disc >= 0) & (far > 0)
        else:
            cos_h, sin_h = math.cos(self.heading), math.sin(self.heading)
            lx, ly = cos_h * ox + sin_h * oy, -sin_h * ox + cos_h * oy
            ldx, ldy = cos_h * dx + sin_h * dy, -sin_h * dx + cos_h * dy
            ldx = np.where(np.abs(ldx) < _TINY, _TINY, ldx)
            ldy = np.where(np.abs(ldy) < _TINY, _TINY, ldy)
            tx1, tx2 = (-self.half_length - lx) / ldx, (self.half_length - lx) / ldx
            ty1, ty2 = (-self.half_width - ly) / ldy, (self.half_width - ly) / ldy
            near = np.maximum(np.minimum(tx1, tx2), np.minimum(ty1, ty2))
            far = np.minimum(np.maximum(tx1, tx2), np.maximum(ty1, ty2))
            hit = (near <= far) & (far > 0)
        return np.where(hit, np.maximum(near, 0.0), np.inf), np.where(hit, far, np.inf)


def cast_rays(
    origins: np.ndarray,
    directions: np.ndarray,
    primitives: Sequence[Primitive],
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """First hit of every ray: (entry distance, exit distance, primitive index or -1)"""
    n = len(directions)
    entry = np.full(n, np.inf)
    exit_ = np.full(n, np.inf)
    index = np.full(n, -1, dtype=np.int64)
    for i, prim in enumerate(primitives):
        near, far = prim.intersect(origins, directions)
        closer = near < entry
        entry = np.where(closer, near, entry)
        exit_ = np.where(closer, far, exit_)
        index = np.where(closer, i, index)
    return entry, exit_, index


def _unit(angles: np.ndarray) -> np.ndarray:
    return np.column_stack([np.cos(angles), np.sin(angles)])


def ego_poses(speed: float, yaw_rate: float, frames: int, interval: float) -> List[EgoPose]:
    """
    Poses of a constant-speed, constant-turn-rate ego over the window.

    Oldest first; the last pose is the reference (identity) pose.
    """
    t_ref = (frames - 1) * interval
    poses = []
    for k in range(frames):
        age = t_ref - k * interval
        if abs(yaw_rate) < 1e-9:
            x, y = -speed * age, 0.0
        else:
            x = -speed * math.sin(yaw_rate * age) / yaw_rate
            y = speed * (1 - math.cos(yaw_rate * age)) / yaw_rate
        poses.append(EgoPose(x=x, y=y, yaw=-yaw_rate * age, timestamp=k * interval))
    return poses


@dataclass
class SceneTruth:
    """Geometry and ego trajectory of one scene"""
    primitives: List[Primitive]
    ego_speed: float
    yaw_rate: float
    poses: List[EgoPose]

    @property
    def ood(self) -> List[Primitive]:
        return [p for p in self.primitives if p.ood_tag is not None]


# ============================================================================
# Sensors
# ============================================================================

def lidar_scan(
    pose: EgoPose,
    primitives: Sequence[Primitive],
    cfg: LidarConfig,
    include_moving: bool = True,
) -> Tuple[LidarCloud, np.ndarray]:
    """
    One 360 degree lidar sweep from the ego origin, in world coordinates.

    Returns the labeled reflections and the observability targets: every
    object return plus the max-range point of each unblocked beam.
    Ground returns (free) are spaced `ground_step` along each beam up to
    the first hit; an object hit yields `layers` returns reaching into the
    object by at most `penetration` each.
    """
    origin = np.array([pose.x, pose.y])
    directions = _unit(np.deg2rad(np.arange(0.0, 360.0, cfg.angular_resolution_deg)) + pose.yaw)
    entry, exit_, index = cast_rays(origin, directions, primitives)
    blocked = entry <= cfg.max_range
    reach = np.where(blocked, entry, cfg.max_range)

    steps = np.arange(cfg.ground_start, cfg.max_range, cfg.ground_step)
    beam, step = np.nonzero(steps[None, :] < reach[:, None] - 1e-9)
    ground = origin + directions[beam] * steps[step][:, None]

    hit_beams = np.nonzero(blocked)[0]
    spacing = np.minimum(cfg.penetration, (exit_[hit_beams] - entry[hit_beams]) / cfg.layers)
    depth = entry[hit_beams][:, None] + spacing[:, None] * np.arange(cfg.layers)[None, :]
    hits = origin + directions[hit_beams][:, None, :] * depth[:, :, None]
    hit_cls = np.repeat([int(primitives[i].cls) for i in index[hit_beams]], cfg.layers).astype(np.int64)
    hits = hits.reshape(-1, 2)

    if not include_moving:
        keep = hit_cls != int(CellClass.MOVING)
        hits, hit_cls = hits[keep], hit_cls[keep]

    cloud = LidarCloud(
        np.concatenate([ground[:, 0], hits[:, 0]]),
        np.concatenate([ground[:, 1], hits[:, 1]]),
        np.concatenate([np.full(len(ground), int(CellClass.FREE)), hit_cls]),
    )
    open_ends = origin + directions[~blocked] * cfg.max_range
    return cloud, np.concatenate([hits, open_ends])


def radar_scan(
    pose: EgoPose,
    primitives: Sequence[Primitive],
    mount: SensorMount,
    sensor_id: int,
    cfg: RadarConfig,
    rng: np.random.Generator,
    ood_rcs: Tuple[float, float] = (0.0, 0.0),
) -> DetectionCloud:
    """
    One radar measurement of a mount, in the ego frame of `pose`.

    Beams sweep the field of view; a hit becomes a detection with
    probability `detection_prob`. Doppler is the radial component of the
    object's ground velocity plus noise. Poisson clutter is added.
    """
    sx, sy = pose.to_world(mount.x, mount.y)
    origin = np.array([float(sx), float(sy)])
    boresight = pose.yaw + math.radians(mount.boresight_deg)
    half = math.radians(mount.fov_deg) / 2
    angles = boresight + np.arange(-half, half + 1e-9, math.radians(cfg.angular_resolution_deg))
    directions = _unit(angles)
    entry, _, index = cast_rays(origin, directions, primitives)
    seen = (entry <= cfg.max_range) & (rng.random(len(directions)) < cfg.detection_prob)
    beams = np.nonzero(seen)[0]

    points = origin + directions[beams] * entry[beams][:, None]
    points = points + rng.normal(0.0, cfg.position_sigma, points.shape)
    velocity = np.array([[primitives[i].vx, primitives[i].vy] for i in index[beams]]).reshape(-1, 2)
    doppler = np.einsum("ij,ij->i", directions[beams], velocity) + rng.normal(0.0, cfg.doppler_sigma, len(beams))
    rcs_mean = np.empty(len(beams))
    rcs_std = np.empty(len(beams))
    for j, i in enumerate(index[beams]):
        prim = primitives[i]
        if prim.ood_tag is not None:
            rcs_mean[j], rcs_std[j] = ood_rcs
        elif prim.cls == CellClass.MOVING:
            rcs_mean[j], rcs_std[j] = cfg.rcs_moving.mean, cfg.rcs_moving.std
        else:
            rcs_mean[j], rcs_std[j] = cfg.rcs_static.mean, cfg.rcs_static.std
    rcs = rcs_mean + rcs_std * rng.standard_normal(len(beams))

    clutter = int(rng.poisson(cfg.clutter_rate))
    clutter_dirs = _unit(boresight + rng.uniform(-half, half, clutter))
    clutter_points = origin + clutter_dirs * rng.uniform(0.5, cfg.max_range, clutter)[:, None]
    clutter_doppler = rng.normal(0.0, cfg.doppler_sigma, clutter)
    clutter_rcs = rng.normal(cfg.rcs_clutter.mean, cfg.rcs_clutter.std, clutter)

    wx = np.concatenate([points[:, 0], clutter_points[:, 0]])
    wy = np.concatenate([points[:, 1], clutter_points[:, 1]])
    ex, ey = pose.from_world(wx, wy)
    n = len(wx)
    return DetectionCloud(
        ex, ey,
        np.concatenate([doppler, clutter_doppler]),
        np.concatenate([rcs, clutter_rcs]),
        np.zeros(n),
        np.full(n, sensor_id),
    )


# ============================================================================
# Service
# ============================================================================

def _count(rng: np.random.Generator, bounds: RangeConfig) -> int:
    return int(rng.integers(int(bounds.min), int(bounds.max) + 1))


def _uniform(rng: np.random.Generator, bounds: RangeConfig) -> float:
    return float(rng.uniform(bounds.min, bounds.max))


class WorldService:
    """Service for synthetic scene and dataset generation"""

    @staticmethod
    def _place(
        rng: np.random.Generator,
        cfg: ScenarioConfig,
        bounding: float,
        max_distance: Optional[float] = None,
        avoid: Sequence[Primitive] = (),
    ) -> Optional[Tuple[float, float]]:
        half_l, half_w = cfg.grid.length_m / 2, cfg.grid.width_m / 2
        for _ in range(PLACEMENT_ATTEMPTS):
            x, y = float(rng.uniform(-half_l, half_l)), float(rng.uniform(-half_w, half_w))
            distance = math.hypot(x, y)
            if distance - bounding < cfg.keep_out:
                continue
            if max_distance is not None and distance > max_distance:
                continue
            if any(math.hypot(x - p.x, y - p.y) < p.bounding_radius + bounding + 0.5 for p in avoid):
                continue
            return x, y
        return None

    @staticmethod
    def sample_truth(cfg: ScenarioConfig, rng: np.random.Generator) -> SceneTruth:
        """Draw the geometry of one scene; OOD discs only when cfg.training is False"""
        speed = _uniform(rng, cfg.ego_speed)
        yaw_rate = float(rng.uniform(-cfg.yaw_rate, cfg.yaw_rate))
        prims: List[Primitive] = []

        for _ in range(_count(rng, cfg.walls)):
            length, heading = _uniform(rng, cfg.wall_length), float(rng.uniform(0, math.pi))
            spot = WorldService._place(rng, cfg, length / 2)
            if spot:
                prims.append(Primitive("rect", *spot, heading=heading, half_length=length / 2,
                                       half_width=cfg.wall_thickness / 2))

        for _ in range(_count(rng, cfg.boxes)):
            a, b = _uniform(rng, cfg.box_size), _uniform(rng, cfg.box_size)
            heading = float(rng.uniform(0, math.pi))
            spot = WorldService._place(rng, cfg, math.hypot(a, b) / 2)
            if spot:
                prims.append(Primitive("rect", *spot, heading=heading, half_length=a / 2, half_width=b / 2))

        for _ in range(_count(rng, cfg.moving)):
            heading, v = float(rng.uniform(-math.pi, math.pi)), _uniform(rng, cfg.moving_speed)
            spot = WorldService._place(rng, cfg, math.hypot(VEHICLE_HALF_LENGTH, VEHICLE_HALF_WIDTH))
            if spot:
                prims.append(Primitive(
                    "rect", *spot, heading=heading,
                    half_length=VEHICLE_HALF_LENGTH, half_width=VEHICLE_HALF_WIDTH,
                    vx=v * math.cos(heading), vy=v * math.sin(heading), cls=CellClass.MOVING,
                ))

        for _ in range(_count(rng, cfg.pedestrians)):
            heading, v = float(rng.uniform(-math.pi, math.pi)), _uniform(rng, cfg.pedestrian_speed)
            spot = WorldService._place(rng, cfg, PEDESTRIAN_RADIUS)
            if spot:
                prims.append(Primitive(
                    "circle", *spot, radius=PEDESTRIAN_RADIUS,
                    vx=v * math.cos(heading), vy=v * math.sin(heading), cls=CellClass.MOVING,
                ))

        if cfg.ood is not None and not cfg.training:
            for _ in range(_count(rng, cfg.ood.count)):
                spot = WorldService._place(rng, cfg, cfg.ood.radius, cfg.lidar.max_range - 1.0, prims)
                if spot:
                    prims.append(Primitive("circle", *spot, radius=cfg.ood.radius, ood_tag=cfg.ood.tag))

        poses = ego_poses(speed, yaw_rate, cfg.frames, cfg.frame_interval)
        return SceneTruth(primitives=prims, ego_speed=speed, yaw_rate=yaw_rate, poses=poses)

    @staticmethod
    def render_scene(
        truth: SceneTruth,
        cfg: ScenarioConfig,
        rng: np.random.Generator,
        name: str = "scene",
    ) -> LabeledScene:
        """
        Simulate radar and lidar on fixed geometry and derive the ground truth.

        Radar: every frame and mount, compensated into the reference frame.
        Lidar: the last `lidar.frames` sweeps for static returns, the
        reference sweep alone for moving objects. OOD discs are invisible
        to the lidar.
        """
        spec = cfg.grid
        reference = truth.poses[-1]
        last = len(truth.poses) - 1
        first_lidar = max(0, len(truth.poses) - cfg.lidar.frames)
        ood_rcs = (cfg.ood.rcs.mean, cfg.ood.rcs.std) if cfg.ood is not None else (0.0, 0.0)

        scans: List[Tuple[DetectionCloud, EgoPose]] = []
        lidar_clouds: List[LidarCloud] = []
        endpoints = np.zeros((0, 2))
        for k, pose in enumerate(truth.poses):
            age = reference.timestamp - pose.timestamp
            prims = [p.at(age) for p in truth.primitives]
            frame = [
                radar_scan(pose, prims, mount, sensor_id, cfg.radar, rng, ood_rcs)
                for sensor_id, mount in enumerate(cfg.sensors)
            ]
            scans.append((DetectionCloud.concat(frame), pose))
            if k >= first_lidar:
                visible = [p for p in prims if p.ood_tag is None]
                cloud, ends = lidar_scan(pose, visible, cfg.lidar, include_moving=(k == last))
                lidar_clouds.append(cloud)
                if k == last:
                    endpoints = ends

        detections = SceneService.ego_motion_compensate(scans, reference)
        lidar = LidarCloud.concat(lidar_clouds)
        sensors = np.array([[m.x, m.y] for m in cfg.sensors], dtype=np.float64)
        return LabeledScene(
            name=name,
            detections=detections,
            lidar=lidar,
            poses=list(truth.poses),
            labels=SceneService.label_grid(lidar, spec),
            weights=SceneService.observability_weights(sensors, endpoints, spec),
            sensors=sensors,
            ood_objects=[OODObject(p.x, p.y, p.radius, p.ood_tag) for p in truth.ood],
        )

    @staticmethod
    def generate_scene(cfg: ScenarioConfig, rng: np.random.Generator, name: str = "scene") -> LabeledScene:
        return WorldService.render_scene(WorldService.sample_truth(cfg, rng), cfg, rng, name)

    @staticmethod
    def generate_dataset(
        cfg: ScenarioConfig,
        n_train: int,
        n_test: int,
        out_dir: Path | str,
        threads: int = 1,
    ) -> DatasetManifest:
        """
        Write a dataset directory with a train and a test split.

        Scene i is generated from the i-th child of SeedSequence(cfg.seed),
        so the output does not depend on `threads`. Feature ranges come from
        the training split only; OOD discs appear only in the test split.
        """
        if n_train <= 0 or n_test <= 0:
            raise ConfigurationError(f"both splits need scenes (train={n_train}, test={n_test})")
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)

        seeds = np.random.SeedSequence(cfg.seed).spawn(n_train + n_test)
        train_cfg = cfg.model_copy(update={"training": True})
        test_cfg = cfg.model_copy(update={"training": False})
        jobs = [(train_cfg, f"train_{i:05d}") for i in range(n_train)]
        jobs += [(test_cfg, f"test_{i:05d}") for i in range(n_test)]

        def run(job_index: int) -> LabeledScene:
            scenario, name = jobs[job_index]
            return WorldService.generate_scene(scenario, np.random.default_rng(seeds[job_index]), name)

        with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
            scenes = list(pool.map(run, range(len(jobs))))
        logger.info("generated %d train and %d test scenes", n_train, n_test)

        train_raw = [DatasetService.raw_features(s, cfg.grid) for s in scenes[:n_train]]
        manifest = DatasetManifest(
            grid=cfg.grid,
            feature_ranges=DatasetService.compute_feature_ranges(train_raw),
            frame_count=cfg.frames,
            sensors=cfg.sensors,
            splits={
                "train": [s.name for s in scenes[:n_train]],
                "test": [s.name for s in scenes[n_train:]],
            },
            scenario=cfg,
        )
        for scene in scenes:
            DatasetService.save_scene(scene, out / f"{scene.name}.json")
        DatasetService.write_manifest(manifest, out)
        logger.info("wrote dataset to %s", out)
        return manifest
