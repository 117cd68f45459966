"""
Tests for gridding, ego-motion compensation, labeling and observability.
"""

import math

import numpy as np
import pytest

from gridbayes.errors import ConfigurationError, ShapeError
from gridbayes.models import CellClass, DetectionCloud, EgoPose, LidarCloud
from gridbayes.schemas import FeatureRange
from gridbayes.services import SceneService


def cloud(xs, ys, doppler=None, rcs=None, t_rel=None):
    n = len(xs)
    return DetectionCloud(
        xs, ys,
        doppler if doppler is not None else np.zeros(n),
        rcs if rcs is not None else np.zeros(n),
        t_rel if t_rel is not None else np.zeros(n),
        np.zeros(n, dtype=int),
    )


def cells(rays_and_cells, c_w):
    _, flat = rays_and_cells
    return {(int(f) // c_w, int(f) % c_w) for f in flat}


# ============================================================================
# Ego motion
# ============================================================================

class TestEgoMotion:
    def test_identical_poses_leave_positions(self):
        pose = EgoPose(1.0, 2.0, 0.3, 0.0)
        out = SceneService.ego_motion_compensate([(cloud([1.0, -2.0], [0.5, 3.0]), pose)], pose)
        np.testing.assert_allclose(out.x, [1.0, -2.0])
        np.testing.assert_allclose(out.y, [0.5, 3.0])
        np.testing.assert_array_equal(out.t_rel, [0.0, 0.0])

    def test_forward_motion_shifts_older_scans_back(self):
        older = EgoPose(0.0, 0.0, 0.0, 0.0)
        reference = EgoPose(2.0, 0.0, 0.0, 0.1)
        out = SceneService.ego_motion_compensate([(cloud([5.0], [1.0]), older)], reference)
        assert out.x[0] == pytest.approx(3.0)
        assert out.y[0] == pytest.approx(1.0)
        assert out.t_rel[0] == pytest.approx(0.1)

    def test_yaw_rotates_into_reference_frame(self):
        older = EgoPose(0.0, 0.0, 0.0, 0.0)
        reference = EgoPose(0.0, 0.0, math.pi / 2, 0.0)
        out = SceneService.ego_motion_compensate([(cloud([1.0], [0.0]), older)], reference)
        assert out.x[0] == pytest.approx(0.0, abs=1e-12)
        assert out.y[0] == pytest.approx(-1.0)

    def test_scans_are_concatenated(self):
        pose = EgoPose()
        out = SceneService.ego_motion_compensate(
            [(cloud([1.0], [0.0]), pose), (cloud([2.0, 3.0], [0.0, 0.0]), pose)], pose
        )
        assert len(out) == 3


# ============================================================================
# Gridding and normalization
# ============================================================================

class TestGridProject:
    def test_cell_index_bounds(self, small_grid):
        rows, cols, inside = SceneService.cell_index(np.array([-4.0, 3.999, 4.0]), np.array([0.0, 0.0, 0.0]), small_grid)
        assert rows[0] == 0 and rows[1] == 7
        assert cols[0] == 4
        np.testing.assert_array_equal(inside, [True, True, False])

    def test_features_per_cell(self, small_grid):
        det = cloud([0.2, 0.3, 10.0], [0.3, 0.4, 0.0], doppler=[-2.0, 4.0, 1.0], rcs=[1.0, 3.0, 5.0],
                    t_rel=[0.0, 0.2, 0.0])
        grid = SceneService.grid_project(det, small_grid)
        assert grid.shape == (8, 8, 4)
        np.testing.assert_allclose(grid[4, 4], [2.0, 3.0, 2.0, 0.1])
        assert np.count_nonzero(grid[..., 0]) == 1
        assert grid[..., 0].sum() == 2.0

    def test_empty_cloud_gives_zero_grid(self, small_grid):
        grid = SceneService.grid_project(DetectionCloud.empty(), small_grid)
        assert not grid.any()

    def test_normalization(self):
        raw = np.array([[[1.0, 5.0, -30.0, 0.6]]])
        ranges = [FeatureRange(min=0, max=4), FeatureRange(min=0, max=20),
                  FeatureRange(min=-10, max=10), FeatureRange(min=0, max=0.4)]
        out = SceneService.normalize_features(raw, ranges)
        np.testing.assert_allclose(out[0, 0], [0.25, 0.25, 0.0, 1.0])

    def test_degenerate_range(self):
        with pytest.raises(ConfigurationError):
            SceneService.normalize_features(np.zeros((1, 1, 1)), [FeatureRange(min=1, max=1)])

    def test_range_count_mismatch(self):
        with pytest.raises(ShapeError):
            SceneService.normalize_features(np.zeros((1, 1, 4)), [FeatureRange(min=0, max=1)])


# ============================================================================
# Labels
# ============================================================================

class TestLabels:
    def lidar_in_cell(self, classes, x=0.5, y=0.5):
        n = len(classes)
        return LidarCloud(np.full(n, x), np.full(n, y), np.asarray(classes))

    def test_majority_wins(self, small_grid):
        labels = SceneService.label_grid(self.lidar_in_cell([0, 0, 0, 1]), small_grid)
        assert labels[4, 4] == CellClass.FREE

    @pytest.mark.parametrize("classes, expected", [
        ([1, 1, 2, 2], CellClass.MOVING),
        ([0, 1], CellClass.OCCUPIED),
        ([0, 2], CellClass.MOVING),
    ])
    def test_ties(self, small_grid, classes, expected):
        assert SceneService.label_grid(self.lidar_in_cell(classes), small_grid)[4, 4] == expected

    def test_cells_without_points_are_unknown(self, small_grid):
        labels = SceneService.label_grid(self.lidar_in_cell([1]), small_grid)
        assert labels.dtype == np.int64
        assert np.sum(labels == CellClass.UNKNOWN) == 63

    def test_unknown_is_not_a_lidar_class(self, small_grid):
        with pytest.raises(ConfigurationError):
            SceneService.label_grid(self.lidar_in_cell([3]), small_grid)


# ============================================================================
# Observability
# ============================================================================

class TestSupercover:
    def test_axis_aligned_segment(self, small_grid):
        covered = SceneService.supercover_cells(np.array([[-3.5, -3.5]]), np.array([[-0.5, -3.5]]), small_grid)
        assert cells(covered, 8) == {(0, 0), (1, 0), (2, 0), (3, 0)}

    def test_corner_crossing_covers_diagonal_neighbours(self, small_grid):
        covered = SceneService.supercover_cells(np.array([[0.5, 0.5]]), np.array([[1.5, 1.5]]), small_grid)
        assert cells(covered, 8) == {(4, 4), (4, 5), (5, 4), (5, 5)}

    def test_zero_length_segment_covers_its_cell(self, small_grid):
        covered = SceneService.supercover_cells(np.array([[0.5, -0.5]]), np.array([[0.5, -0.5]]), small_grid)
        assert cells(covered, 8) == {(4, 3)}

    def test_clipped_to_grid(self, small_grid):
        covered = SceneService.supercover_cells(np.array([[3.5, 0.5]]), np.array([[9.5, 0.5]]), small_grid)
        assert cells(covered, 8) == {(7, 4)}


class TestObservability:
    def test_unobstructed_rays_give_full_weight(self, small_grid):
        angles = np.deg2rad(np.arange(0.0, 360.0, 1.0))
        ends = 20.0 * np.column_stack([np.cos(angles), np.sin(angles)])
        weights = SceneService.observability_weights(np.zeros((1, 2)), ends, small_grid)
        np.testing.assert_array_equal(weights, np.ones((8, 8)))

    def test_cells_behind_end_point_are_hidden(self, small_grid):
        weights = SceneService.observability_weights(np.array([[0.5, 0.5]]), np.array([[2.5, 0.5]]), small_grid)
        np.testing.assert_array_equal(weights[4:7, 4], [1.0, 1.0, 1.0])
        assert weights[7, 4] == 0.0
        assert weights.sum() == 3.0

    def test_one_of_four_rays_reaching(self, small_grid):
        ends = np.array([[3.5, 0.5], [-1.5, 0.52], [-1.5, 0.54], [-1.5, 0.56]])
        weights = SceneService.observability_weights(np.array([[-3.5, 0.5]]), ends, small_grid)
        np.testing.assert_allclose(weights[0:3, 4], 1.0)
        np.testing.assert_allclose(weights[3:8, 4], 0.25)

    def test_weights_are_ratios(self, rng, small_grid):
        ends = rng.uniform(-6.0, 6.0, size=(40, 2))
        sensors = np.array([[1.0, 0.4], [-1.0, -0.4]])
        weights = SceneService.observability_weights(sensors, ends, small_grid)
        assert weights.shape == (8, 8)
        assert np.all((weights >= 0) & (weights <= 1))

    def test_no_end_points(self, small_grid):
        weights = SceneService.observability_weights(np.zeros((1, 2)), np.zeros((0, 2)), small_grid)
        assert not weights.any()

    def test_needs_a_sensor(self, small_grid):
        with pytest.raises(ConfigurationError):
            SceneService.observability_weights(np.zeros((0, 2)), np.ones((1, 2)), small_grid)
