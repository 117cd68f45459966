"""
Tests for evaluation metrics.
"""

from types import SimpleNamespace

import numpy as np
import pytest

from gridbayes.errors import NotVariationalError, ShapeError
from gridbayes.models import CellClass, OODObject, UncertaintyKind, Variant
from gridbayes.network import build_network
from gridbayes.schemas import DatasetManifest, FeatureRange, GridSpec
from gridbayes.services import DatasetService, MetricsService, UncertaintyMaps
from gridbayes.services.metrics_service import ConfusionCounts, PrecisionCurve

from conftest import TINY_TEST


# ============================================================================
# Confusion counts and IoU
# ============================================================================

class TestIoU:
    def test_three_cell_example(self):
        counts = MetricsService.confusion_counts(np.array([0, 1, 0]), np.array([0, 0, 0]), np.ones(3))
        np.testing.assert_array_equal(counts.tp, [2, 0, 0, 0])
        np.testing.assert_array_equal(counts.fp, [0, 1, 0, 0])
        np.testing.assert_array_equal(counts.fn, [1, 0, 0, 0])
        iou = MetricsService.iou(counts)
        assert iou.per_class[CellClass.FREE] == pytest.approx(2 / 3)
        assert iou.per_class[CellClass.OCCUPIED] == 0.0
        np.testing.assert_array_equal(iou.absent, [False, False, True, True])
        assert iou.mean == pytest.approx(2 / 3 / 4)

    def test_invisible_cells_are_ignored(self):
        counts = MetricsService.confusion_counts(
            np.array([0, 1, 2]), np.array([0, 0, 0]), np.array([1.0, 0.0, 0.0])
        )
        np.testing.assert_array_equal(counts.tp, [1, 0, 0, 0])
        assert counts.fp.sum() == 0 and counts.fn.sum() == 0

    def test_partial_observability_counts_as_visible(self):
        counts = MetricsService.confusion_counts(np.array([[3]]), np.array([[3]]), np.array([[0.25]]))
        assert counts.tp[CellClass.UNKNOWN] == 1

    def test_counts_add(self):
        a = MetricsService.confusion_counts(np.array([0]), np.array([0]), np.ones(1))
        b = MetricsService.confusion_counts(np.array([1]), np.array([0]), np.ones(1))
        total = a + b
        np.testing.assert_array_equal(total.tp, [1, 0, 0, 0])
        np.testing.assert_array_equal(total.fp, [0, 1, 0, 0])
        assert ConfusionCounts.zeros(4).num_classes == 4

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            MetricsService.confusion_counts(np.zeros(3), np.zeros(4), np.ones(3))


# ============================================================================
# Uncertainty/precision curves
# ============================================================================

class TestPrecisionCurves:
    @pytest.fixture
    def ranked_cells(self):
        """Ten class-0 predictions; the five most certain are correct"""
        pred = np.zeros(10, dtype=int)
        labels = np.array([0] * 5 + [1] * 5)
        uncertainty = np.arange(1, 11) / 10
        return pred, uncertainty, labels, np.ones(10)

    def test_nearest_rank_thresholds(self, ranked_cells):
        curve = MetricsService.uncertainty_precision_curve(*ranked_cells, UncertaintyKind.EPISTEMIC)
        np.testing.assert_allclose(curve.thresholds[0], np.arange(1, 11) / 10)
        np.testing.assert_array_equal(curve.support[0], np.arange(1, 11))
        expected = [min(k, 5) / k for k in range(1, 11)]
        np.testing.assert_allclose(curve.precision[0], expected)
        np.testing.assert_allclose(curve.quantiles, np.arange(1, 11) / 10)

    def test_last_quantile_is_overall_precision(self, ranked_cells):
        curve = MetricsService.uncertainty_precision_curve(*ranked_cells, UncertaintyKind.ALEATORIC)
        assert curve.overall_precision(0) == 0.5
        assert curve.kind == UncertaintyKind.ALEATORIC

    def test_classes_without_predictions(self, ranked_cells):
        curve = MetricsService.uncertainty_precision_curve(*ranked_cells, UncertaintyKind.EPISTEMIC)
        np.testing.assert_array_equal(curve.empty, [False, True, True, True])
        assert np.all(np.isnan(curve.precision[1]))
        assert np.all(curve.support[1] == 0)

    def test_small_class_repeats_thresholds(self):
        curve = MetricsService.uncertainty_precision_curve(
            np.array([2, 2, 0]), np.array([0.4, 0.2, 0.9]), np.array([2, 1, 0]), np.ones(3),
            UncertaintyKind.EPISTEMIC,
        )
        np.testing.assert_allclose(curve.thresholds[2, :5], 0.2)
        np.testing.assert_allclose(curve.thresholds[2, 5:], 0.4)
        assert curve.precision[2, 0] == 0.0
        assert curve.precision[2, -1] == 0.5

    def test_uncertainty_grid_must_match(self, ranked_cells):
        pred, _, labels, weights = ranked_cells
        with pytest.raises(ShapeError):
            MetricsService.uncertainty_precision_curve(pred, np.zeros(9), labels, weights, UncertaintyKind.EPISTEMIC)

    def curve(self, rows, empty=None):
        precision = np.asarray(rows, dtype=float)
        n = precision.shape[1]
        return PrecisionCurve(
            kind=UncertaintyKind.EPISTEMIC,
            quantiles=np.arange(1, n + 1) / n,
            thresholds=np.zeros_like(precision),
            precision=precision,
            support=np.ones(precision.shape, dtype=np.int64),
            empty=np.zeros(len(precision), dtype=bool) if empty is None else np.asarray(empty),
        )

    def test_correlation(self):
        curve = self.curve([
            np.linspace(1.0, 0.5, 10),
            np.linspace(0.5, 1.0, 10),
            np.full(10, 0.8),
            np.full(10, np.nan),
        ], empty=[False, False, False, True])
        rho = MetricsService.certainty_precision_correlation(curve)
        np.testing.assert_allclose(rho, [1.0, -1.0, 0.0, 0.0])

    @pytest.mark.filterwarnings("error")
    def test_constant_precision_is_quiet(self):
        curve = self.curve([np.full(10, 0.8), np.ones(10)])
        np.testing.assert_array_equal(MetricsService.certainty_precision_correlation(curve), [0.0, 0.0])


# ============================================================================
# Weight statistics
# ============================================================================

class TestWeightStats:
    @pytest.mark.parametrize("variant", [Variant.HYBRID, Variant.PROBABILISTIC])
    def test_head_density(self, network_config, variant):
        net = build_network(network_config(variant))
        density = MetricsService.weight_density_stats(net, bins=16)
        head = net.layer("head")
        total = head.weight.size + head.bias.size
        assert density.layer == "head"
        assert density.mu_counts.sum() == total
        assert density.sigma_counts.sum() == total
        assert len(density.mu_edges) == 17
        assert density.sigma_p10 <= density.sigma_p90

    def test_snr_per_layer(self, network_config):
        net = build_network(network_config(Variant.PROBABILISTIC))
        stats = MetricsService.weight_snr_stats(net)
        assert [s.layer for s in stats] == [conv.name for conv in net.variational_layers()]
        for s in stats:
            assert 0 <= s.p10 <= s.p50 <= s.p90

    def test_snr_of_selected_layer(self, network_config):
        net = build_network(network_config(Variant.HYBRID))
        stats = MetricsService.weight_snr_stats(net, layers=["head"])
        assert len(stats) == 1 and stats[0].layer == "head"

    def test_accepts_checkpoints(self, trained_checkpoint):
        ckpt = trained_checkpoint(Variant.HYBRID)
        assert MetricsService.weight_density_stats(ckpt).layer == "head"

    def test_point_networks_have_no_densities(self, network_config):
        net = build_network(network_config(Variant.DETERMINISTIC))
        with pytest.raises(NotVariationalError):
            MetricsService.weight_density_stats(net)
        with pytest.raises(NotVariationalError):
            MetricsService.weight_snr_stats(net)

    def test_hybrid_feature_layers_are_point_layers(self, network_config):
        net = build_network(network_config(Variant.HYBRID))
        point = next(conv.name for conv in net.conv_layers() if not conv.variational)
        with pytest.raises(NotVariationalError):
            MetricsService.weight_density_stats(net, layer=point)


# ============================================================================
# OOD response
# ============================================================================

class TestOODResponse:
    @pytest.fixture
    def manifest(self):
        return DatasetManifest(grid=GridSpec(c_l=8, c_w=8, cell_size=1.0),
                               feature_ranges=[FeatureRange(min=0, max=1)] * 4)

    def dataset(self, manifest, ood_objects):
        return SimpleNamespace(
            manifest=manifest,
            scenes=[SimpleNamespace(ood_objects=ood_objects)],
            labels=np.zeros((1, 8, 8), dtype=np.int64),
            weights=np.ones((1, 8, 8)),
        )

    def maps(self, near_value):
        epistemic = np.full((8, 8), 0.1)
        for r, c in [(4, 4), (3, 4), (5, 4), (4, 3), (4, 5)]:
            epistemic[r, c] = near_value
        return UncertaintyMaps(
            predictive=epistemic + 0.2, aleatoric=np.full((8, 8), 0.2),
            epistemic=epistemic, predicted=np.zeros((8, 8), dtype=np.int64),
        )

    def test_ratios(self, manifest):
        cone = OODObject(x=0.5, y=0.5, radius=0.15, tag="cone")
        report = MetricsService.ood_response(self.dataset(manifest, [cone]), [self.maps(0.5)])
        assert report.near_cells == 5
        assert report.free_cells == 59
        assert report.epistemic_ratio == pytest.approx(5.0)
        assert report.aleatoric_ratio == pytest.approx(1.0)

    def test_no_ood_objects(self, manifest):
        assert MetricsService.ood_response(self.dataset(manifest, []), [self.maps(0.1)]) is None

    def test_cell_centers(self, manifest):
        cx, cy = MetricsService.cell_centers(manifest.grid)
        assert cx[0, 0] == -3.5 and cy[0, 0] == -3.5
        assert cx[4, 7] == 0.5 and cy[4, 7] == 3.5


# ============================================================================
# Dataset evaluation
# ============================================================================

@pytest.fixture(scope="module")
def held_out(tiny_dataset_dir):
    return DatasetService.load_dataset(tiny_dataset_dir, "test")


class TestEvaluate:
    def test_report(self, trained_checkpoint, held_out):
        ckpt = trained_checkpoint(Variant.PROBABILISTIC)
        report = MetricsService.evaluate(ckpt.network, held_out, 3, np.random.default_rng(0))
        summary = report.summary()
        assert summary.variant == Variant.PROBABILISTIC
        assert (summary.split, summary.scenes, summary.mc_samples) == ("test", TINY_TEST, 3)
        assert summary.visible_cells == int(np.count_nonzero(held_out.weights > 0))
        assert 0.0 <= summary.miou <= 1.0
        assert [c.name for c in summary.classes] == ["free", "occupied", "moving", "unknown"]
        assert len(summary.curves) == 8
        for record in summary.curves:
            assert len(record.precision) == 10
            assert -1.0 <= record.spearman <= 1.0
            if record.empty:
                assert all(p is None for p in record.precision)

    def test_deterministic_network_reports_one_sample(self, trained_checkpoint, held_out):
        report = MetricsService.evaluate(trained_checkpoint(Variant.DETERMINISTIC).network, held_out, 5,
                                         np.random.default_rng(0))
        assert report.mc_samples == 1
        epistemic = report.curves[UncertaintyKind.EPISTEMIC].thresholds
        assert np.nansum(epistemic) == 0.0

    def test_same_rng_same_report(self, trained_checkpoint, held_out):
        net = trained_checkpoint(Variant.HYBRID).network
        a = MetricsService.evaluate(net, held_out, 3, np.random.default_rng(2)).summary()
        b = MetricsService.evaluate(net, held_out, 3, np.random.default_rng(2)).summary()
        assert a == b
