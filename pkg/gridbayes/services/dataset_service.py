"""
Dataset service - reads and writes dataset directories.

A dataset directory holds:
- manifest.json: grid spec, feature ranges, class names, frame count, splits
- <scene>.json: one SceneRecord per scene

Floats are rounded to 4 decimals on write so the same scenes always give
the same bytes.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np
from pydantic import ValidationError

from ..errors import ConfigurationError, ShapeError
from ..models import DetectionCloud, EgoPose, LabeledScene, LidarCloud, OODObject
from ..schemas import (
    DatasetManifest,
    DetectionColumns,
    FeatureRange,
    GridSpec,
    LidarColumns,
    OODRecord,
    PoseRecord,
    SceneRecord,
)
from ..tensor import default_dtype
from .scene_service import SceneService

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
DECIMALS = 4


def _rounded(values: np.ndarray) -> List[float]:
    return [float(v) for v in np.round(np.asarray(values, dtype=np.float64), DECIMALS)]


@dataclass
class SceneDataset:
    """
    Stacked network inputs of one split.

    features: N x F x c_l x c_w (float32), labels: N x c_l x c_w,
    weights: N x c_l x c_w observability weights.
    """
    names: List[str]
    features: np.ndarray
    labels: np.ndarray
    weights: np.ndarray
    scenes: List[LabeledScene]
    manifest: DatasetManifest

    def __len__(self) -> int:
        return len(self.names)

    def batch(self, indices: Sequence[int]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        index = np.asarray(indices, dtype=np.int64)
        return self.features[index], self.labels[index], self.weights[index]


class DatasetService:
    """Service for dataset directory IO"""

    # ========================================================================
    # Scenes
    # ========================================================================

    @staticmethod
    def scene_to_record(scene: LabeledScene) -> SceneRecord:
        det, lidar = scene.detections, scene.lidar
        return SceneRecord(
            name=scene.name,
            detections=DetectionColumns(
                x=_rounded(det.x),
                y=_rounded(det.y),
                doppler=_rounded(det.doppler),
                rcs=_rounded(det.rcs),
                t_rel=_rounded(det.t_rel),
                sensor=[int(s) for s in det.sensor],
            ),
            lidar=LidarColumns(x=_rounded(lidar.x), y=_rounded(lidar.y), cls=[int(c) for c in lidar.cls]),
            poses=[
                PoseRecord(
                    x=round(p.x, DECIMALS),
                    y=round(p.y, DECIMALS),
                    yaw=round(p.yaw, DECIMALS),
                    timestamp=round(p.timestamp, DECIMALS),
                )
                for p in scene.poses
            ],
            labels=[int(v) for v in np.asarray(scene.labels).ravel()],
            weights=_rounded(np.asarray(scene.weights).ravel()),
            sensors=[(round(float(x), DECIMALS), round(float(y), DECIMALS)) for x, y in np.asarray(scene.sensors)],
            ood_objects=[
                OODRecord(x=round(o.x, DECIMALS), y=round(o.y, DECIMALS), radius=o.radius, tag=o.tag)
                for o in scene.ood_objects
            ],
        )

    @staticmethod
    def record_to_scene(record: SceneRecord, spec: GridSpec) -> LabeledScene:
        """Rebuild a scene; label and weight grids must match the grid spec"""
        size = spec.c_l * spec.c_w
        if len(record.labels) != size or len(record.weights) != size:
            raise ShapeError(
                f"scene {record.name} does not match the {spec.c_l} x {spec.c_w} grid",
                [(len(record.labels),), (len(record.weights),), (size,)],
            )
        det = record.detections
        try:
            detections = DetectionCloud(det.x, det.y, det.doppler, det.rcs, det.t_rel, det.sensor)
            lidar = LidarCloud(record.lidar.x, record.lidar.y, record.lidar.cls)
        except ValueError as exc:
            raise ConfigurationError(f"scene {record.name}: {exc}") from exc
        return LabeledScene(
            name=record.name,
            detections=detections,
            lidar=lidar,
            poses=[EgoPose(p.x, p.y, p.yaw, p.timestamp) for p in record.poses],
            labels=np.asarray(record.labels, dtype=np.int64).reshape(spec.shape),
            weights=np.asarray(record.weights, dtype=np.float64).reshape(spec.shape),
            sensors=np.asarray(record.sensors, dtype=np.float64).reshape(-1, 2),
            ood_objects=[OODObject(o.x, o.y, o.radius, o.tag) for o in record.ood_objects],
        )

    @staticmethod
    def save_scene(scene: LabeledScene, path: Path | str) -> Path:
        path = Path(path)
        path.write_text(DatasetService.scene_to_record(scene).model_dump_json())
        return path

    @staticmethod
    def load_scene(path: Path | str, spec: GridSpec) -> LabeledScene:
        path = Path(path)
        try:
            record = SceneRecord.model_validate_json(path.read_text())
        except ValidationError as exc:
            raise ConfigurationError(f"invalid scene file {path}: {exc.error_count()} validation errors") from exc
        return DatasetService.record_to_scene(record, spec)

    # ========================================================================
    # Manifest
    # ========================================================================

    @staticmethod
    def write_manifest(manifest: DatasetManifest, directory: Path | str) -> Path:
        path = Path(directory) / MANIFEST_NAME
        path.write_text(manifest.model_dump_json(indent=2))
        return path

    @staticmethod
    def load_manifest(directory: Path | str) -> DatasetManifest:
        path = Path(directory) / MANIFEST_NAME
        try:
            return DatasetManifest.model_validate_json(path.read_text())
        except ValidationError as exc:
            raise ConfigurationError(f"invalid manifest {path}: {exc.error_count()} validation errors") from exc

    # ========================================================================
    # Features
    # ========================================================================

    @staticmethod
    def raw_features(scene: LabeledScene, spec: GridSpec) -> np.ndarray:
        return SceneService.grid_project(scene.detections, spec)

    @staticmethod
    def compute_feature_ranges(raw_grids: Sequence[np.ndarray]) -> List[FeatureRange]:
        """
        Per-feature (min, max) over the non-empty cells of the given grids.

        A feature that never varies gets max = min + 1 so normalization stays
        defined; grids without any detection give (0, 1) everywhere.
        """
        stacked = [g[g[..., 0] > 0] for g in raw_grids]
        cells = np.concatenate(stacked) if stacked else np.zeros((0, 4))
        if len(cells) == 0:
            return [FeatureRange(min=0.0, max=1.0) for _ in range(raw_grids[0].shape[-1] if raw_grids else 4)]
        ranges = []
        for channel in range(cells.shape[1]):
            lo = float(np.round(cells[:, channel].min(), DECIMALS))
            hi = float(np.round(cells[:, channel].max(), DECIMALS))
            if channel == 0:
                lo = 0.0
            ranges.append(FeatureRange(min=lo, max=hi if hi > lo else lo + 1.0))
        return ranges

    @staticmethod
    def scene_features(scene: LabeledScene, spec: GridSpec, ranges: Sequence[FeatureRange]) -> np.ndarray:
        """Normalized features of one scene, channels first (F x c_l x c_w)"""
        normalized = SceneService.normalize_features(DatasetService.raw_features(scene, spec), ranges)
        return np.moveaxis(normalized, -1, 0).astype(default_dtype())

    @staticmethod
    def from_scenes(scenes: Sequence[LabeledScene], manifest: DatasetManifest) -> SceneDataset:
        """Stack in-memory scenes into a dataset"""
        spec = manifest.grid
        if not scenes:
            raise ConfigurationError("a dataset needs at least one scene")
        features = np.stack([DatasetService.scene_features(s, spec, manifest.feature_ranges) for s in scenes])
        labels = np.stack([np.asarray(s.labels, dtype=np.int64) for s in scenes])
        weights = np.stack([np.asarray(s.weights, dtype=np.float64) for s in scenes]).astype(default_dtype())
        return SceneDataset(
            names=[s.name for s in scenes],
            features=features,
            labels=labels,
            weights=weights,
            scenes=list(scenes),
            manifest=manifest,
        )

    @staticmethod
    def load_dataset(directory: Path | str, split: str) -> SceneDataset:
        directory = Path(directory)
        manifest = DatasetService.load_manifest(directory)
        if split not in manifest.splits:
            known = ", ".join(sorted(manifest.splits)) or "none"
            raise ConfigurationError(f"unknown split {split!r}; splits: {known}")
        names = manifest.splits[split]
        scenes = [DatasetService.load_scene(directory / f"{name}.json", manifest.grid) for name in names]
        logger.info("loaded %d scenes of split %s from %s", len(scenes), split, directory)
        return DatasetService.from_scenes(scenes, manifest)
