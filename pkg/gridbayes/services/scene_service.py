"""
Scene service - turns point clouds into network inputs and ground truth.

Operations:
- Ego-motion compensation and concatenation of radar scans
- Projection of detections into per-cell features
- Feature normalization with dataset-level ranges
- Lidar majority-vote labels
- Ray-based observability weights
"""

from __future__ import annotations

import logging
from typing import Sequence, Tuple

import numpy as np

from ..errors import ConfigurationError, ShapeError
from ..models import CellClass, DetectionCloud, EgoPose, LidarCloud
from ..schemas import FeatureRange, GridSpec

logger = logging.getLogger(__name__)

# Label priority on ties, highest first
TIE_PRIORITY = (CellClass.MOVING, CellClass.OCCUPIED, CellClass.FREE)
_CORNER_TOL = 1e-9


class SceneService:
    """Pure grid operations on point clouds"""

    @staticmethod
    def cell_index(x: np.ndarray, y: np.ndarray, spec: GridSpec) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """
        Row/col of each point and a mask of points inside the grid.

        row = floor((x + length/2) / cell_size), col likewise with y and width.
        Row 0 is the rear-most row.
        """
        rows = np.floor((np.asarray(x) + spec.length_m / 2) / spec.cell_size).astype(np.int64)
        cols = np.floor((np.asarray(y) + spec.width_m / 2) / spec.cell_size).astype(np.int64)
        inside = (rows >= 0) & (rows < spec.c_l) & (cols >= 0) & (cols < spec.c_w)
        return rows, cols, inside

    @staticmethod
    def ego_motion_compensate(
        clouds: Sequence[Tuple[DetectionCloud, EgoPose]],
        reference: EgoPose,
    ) -> DetectionCloud:
        """
        Express every scan in the reference ego frame and concatenate them.

        t_rel of each detection becomes the age of its scan relative to the
        reference pose timestamp.
        """
        merged = []
        for cloud, pose in clouds:
            wx, wy = pose.to_world(cloud.x, cloud.y)
            rx, ry = reference.from_world(wx, wy)
            age = max(reference.timestamp - pose.timestamp, 0.0)
            merged.append(DetectionCloud(rx, ry, cloud.doppler, cloud.rcs, np.full(len(cloud), age), cloud.sensor))
        return DetectionCloud.concat(merged)

    @staticmethod
    def grid_project(detections: DetectionCloud, spec: GridSpec) -> np.ndarray:
        """
        Raw c_l x c_w x 4 features: count, mean |doppler|, mean rcs, mean t_rel.

        Detections outside the grid are dropped; empty cells stay zero.
        """
        rows, cols, inside = SceneService.cell_index(detections.x, detections.y, spec)
        flat = rows[inside] * spec.c_w + cols[inside]
        size = spec.c_l * spec.c_w
        count = np.bincount(flat, minlength=size).astype(np.float64)
        features = np.zeros((size, 4), dtype=np.float64)
        features[:, 0] = count
        occupied = count > 0
        for channel, values in ((1, np.abs(detections.doppler)), (2, detections.rcs), (3, detections.t_rel)):
            sums = np.bincount(flat, weights=values[inside], minlength=size)
            features[occupied, channel] = sums[occupied] / count[occupied]
        return features.reshape(spec.c_l, spec.c_w, 4)

    @staticmethod
    def normalize_features(raw: np.ndarray, ranges: Sequence[FeatureRange]) -> np.ndarray:
        """clamp((v - min) / (max - min), 0, 1) per feature channel"""
        if raw.shape[-1] != len(ranges):
            raise ShapeError("one range per feature channel is required", [raw.shape, (len(ranges),)])
        out = np.empty_like(raw, dtype=np.float64)
        for channel, bounds in enumerate(ranges):
            if not bounds.max > bounds.min:
                raise ConfigurationError(
                    f"degenerate normalization range for feature {channel}: [{bounds.min}, {bounds.max}]"
                )
            out[..., channel] = (raw[..., channel] - bounds.min) / (bounds.max - bounds.min)
        return np.clip(out, 0.0, 1.0)

    @staticmethod
    def label_grid(lidar: LidarCloud, spec: GridSpec) -> np.ndarray:
        """
        Majority class of the lidar points in each cell.

        Cells without points are unknown; ties resolve moving > occupied > free.
        """
        allowed = {int(c) for c in TIE_PRIORITY}
        if len(lidar) and not set(np.unique(lidar.cls).tolist()) <= allowed:
            raise ConfigurationError("lidar classes must be free, occupied or moving")
        rows, cols, inside = SceneService.cell_index(lidar.x, lidar.y, spec)
        flat = rows[inside] * spec.c_w + cols[inside]
        size = spec.c_l * spec.c_w
        cls = lidar.cls[inside]
        counts = np.stack([np.bincount(flat[cls == c], minlength=size) for c in TIE_PRIORITY])
        winner = np.asarray([int(c) for c in TIE_PRIORITY])[np.argmax(counts, axis=0)]
        labels = np.where(counts.sum(axis=0) > 0, winner, int(CellClass.UNKNOWN))
        return labels.reshape(spec.c_l, spec.c_w).astype(np.int64)

    # ------------------------------------------------------------------
    # Observability
    # ------------------------------------------------------------------

    @staticmethod
    def supercover_cells(
        starts: np.ndarray,
        ends: np.ndarray,
        spec: GridSpec,
    ) -> Tuple[np.ndarray, np.ndarray]:
        """
        Grid cells touched by each segment, end cells inclusive.

        Returns (ray index, flat cell index) pairs, unique per ray and
        restricted to the grid. Segments passing exactly through a cell
        corner also cover the two cells diagonal to their path.
        """
        starts = np.atleast_2d(np.asarray(starts, dtype=np.float64))
        ends = np.atleast_2d(np.asarray(ends, dtype=np.float64))
        n = len(starts)
        if n == 0:
            return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
        # continuous cell coordinates
        u0 = (starts[:, 0] + spec.length_m / 2) / spec.cell_size
        v0 = (starts[:, 1] + spec.width_m / 2) / spec.cell_size
        u1 = (ends[:, 0] + spec.length_m / 2) / spec.cell_size
        v1 = (ends[:, 1] + spec.width_m / 2) / spec.cell_size
        du, dv = u1 - u0, v1 - v0

        def crossings(a0, a1, da, limit):
            lo = np.clip(np.ceil(np.minimum(a0, a1)), 0, limit)
            hi = np.clip(np.floor(np.maximum(a0, a1)), -1, limit)
            k = np.arange(limit + 1)[None, :]
            valid = (k >= lo[:, None]) & (k <= hi[:, None]) & (da[:, None] != 0)
            with np.errstate(divide="ignore", invalid="ignore"):
                t = (k - a0[:, None]) / da[:, None]
            return np.where(valid & (t > 0) & (t < 1), t, np.nan)

        tu = crossings(u0, u1, du, spec.c_l)
        tv = crossings(v0, v1, dv, spec.c_w)
        bounds = np.column_stack([np.zeros(n), np.ones(n)])
        t_all = np.sort(np.concatenate([bounds, tu, tv], axis=1), axis=1)  # NaN sorts last

        rays, cells = [], []

        def emit(ray_ids, uu, vv):
            r = np.floor(uu).astype(np.int64)
            c = np.floor(vv).astype(np.int64)
            keep = (r >= 0) & (r < spec.c_l) & (c >= 0) & (c < spec.c_w)
            rays.append(ray_ids[keep])
            cells.append(r[keep] * spec.c_w + c[keep])

        ray_ids = np.repeat(np.arange(n), t_all.shape[1] - 1)
        mids = (t_all[:, :-1] + t_all[:, 1:]) / 2
        ok = np.isfinite(mids).ravel() & (np.diff(t_all, axis=1).ravel() > _CORNER_TOL)
        mids = mids.ravel()
        emit(ray_ids[ok], (u0[ray_ids] + du[ray_ids] * mids)[ok], (v0[ray_ids] + dv[ray_ids] * mids)[ok])

        # end cells (also covers zero-length segments)
        idx = np.arange(n)
        emit(idx, u0, v0)
        emit(idx, u1, v1)

        # corners: a row line and a column line crossed at the same t
        twin = np.isfinite(t_all[:, 1:]) & (np.diff(t_all, axis=1) <= _CORNER_TOL)
        hit_ray, hit_j = np.nonzero(twin)
        if hit_ray.size:
            t = t_all[hit_ray, hit_j]
            pu = u0[hit_ray] + du[hit_ray] * t
            pv = v0[hit_ray] + dv[hit_ray] * t
            cu, cv = np.round(pu), np.round(pv)
            on_corner = (np.abs(pu - cu) < 1e-6) & (np.abs(pv - cv) < 1e-6)
            hit_ray, cu, cv = hit_ray[on_corner], cu[on_corner], cv[on_corner]
            for off_u, off_v in ((-0.5, -0.5), (-0.5, 0.5), (0.5, -0.5), (0.5, 0.5)):
                emit(hit_ray, cu + off_u, cv + off_v)

        pairs = np.unique(np.concatenate(rays) * (spec.c_l * spec.c_w) + np.concatenate(cells))
        size = spec.c_l * spec.c_w
        return pairs // size, pairs % size

    @staticmethod
    def observability_weights(
        sensors: np.ndarray,
        endpoints: np.ndarray,
        spec: GridSpec,
    ) -> np.ndarray:
        """
        Ratio of rays reaching each cell to rays that would reach it unblocked.

        For every sensor/end-point pair the actual ray runs from the sensor to
        the end point (end cell inclusive); the candidate ray continues in the
        same direction to the grid boundary. Cells no candidate ray touches
        get weight 0.
        """
        sensors = np.atleast_2d(np.asarray(sensors, dtype=np.float64))
        endpoints = np.asarray(endpoints, dtype=np.float64).reshape(-1, 2)
        if len(sensors) == 0 or sensors.shape[1] != 2:
            raise ConfigurationError("observability needs at least one sensor position")
        size = spec.c_l * spec.c_w
        if len(endpoints) == 0:
            return np.zeros(spec.shape)

        starts = np.repeat(sensors, len(endpoints), axis=0)
        ends = np.tile(endpoints, (len(sensors), 1))
        direction = ends - starts
        length = np.linalg.norm(direction, axis=1)
        reach = np.hypot(spec.length_m, spec.width_m) * 1.5
        unit = np.divide(direction, length[:, None], out=np.zeros_like(direction), where=length[:, None] > 0)
        extended = np.where(length[:, None] > 0, starts + unit * (np.linalg.norm(starts, axis=1)[:, None] + reach), ends)

        _, actual_cells = SceneService.supercover_cells(starts, ends, spec)
        _, candidate_cells = SceneService.supercover_cells(starts, extended, spec)
        actual = np.bincount(actual_cells, minlength=size).astype(np.float64)
        candidate = np.bincount(candidate_cells, minlength=size).astype(np.float64)
        weights = np.divide(actual, candidate, out=np.zeros(size), where=candidate > 0)
        return np.clip(weights, 0.0, 1.0).reshape(spec.shape)
