"""
Metrics service - evaluation over observable cells.

Metrics:
- Confusion counts and IoU / mIoU over cells with observability > 0
- Per-class precision at ten uncertainty quantiles (nearest rank)
- Spearman correlation between certainty and precision
- Weight densities and signal-to-noise ratios of variational layers
- Entropy response near OOD objects

Relationships:
- evaluate() runs UncertaintyService over a SceneDataset and feeds
  every other metric; EvaluationReport.summary() is the JSON form
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
from scipy.stats import spearmanr

from ..errors import ConfigurationError, NotVariationalError, ShapeError
from ..layers import VariationalConv
from ..models import CLASS_NAMES, UncertaintyKind
from ..network import Network
from ..schemas import ClassIoU, CurveRecord, EvaluationSummary, GridSpec, OODReport
from .checkpoint_service import Checkpoint
from .dataset_service import SceneDataset
from .uncertainty_service import UncertaintyMaps, UncertaintyService

logger = logging.getLogger(__name__)

N_QUANTILES = 10
DENSITY_BINS = 64
OOD_RADIUS = 1.0
EVAL_BATCH = 8


# ============================================================================
# Result containers
# ============================================================================

@dataclass
class ConfusionCounts:
    """Per-class true positives, false positives and false negatives"""
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray

    @classmethod
    def zeros(cls, num_classes: int) -> "ConfusionCounts":
        return cls(*(np.zeros(num_classes, dtype=np.int64) for _ in range(3)))

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)

    @property
    def num_classes(self) -> int:
        return len(self.tp)


@dataclass
class IoUResult:
    per_class: np.ndarray
    absent: np.ndarray
    mean: float


@dataclass
class PrecisionCurve:
    """
    thresholds / precision / support are num_classes x N_QUANTILES.

    Empty classes (no predictions) carry NaN thresholds and precisions.
    """
    kind: UncertaintyKind
    quantiles: np.ndarray
    thresholds: np.ndarray
    precision: np.ndarray
    support: np.ndarray
    empty: np.ndarray

    def overall_precision(self, cls: int) -> float:
        return float(self.precision[cls, -1])


@dataclass
class WeightDensity:
    layer: str
    mu_counts: np.ndarray
    mu_edges: np.ndarray
    sigma_counts: np.ndarray
    sigma_edges: np.ndarray
    sigma_p10: float
    sigma_p90: float


@dataclass
class LayerSNR:
    layer: str
    count: int
    p10: float
    p50: float
    p90: float


@dataclass
class EvaluationReport:
    variant: str
    split: str
    scenes: int
    mc_samples: int
    counts: ConfusionCounts
    iou: IoUResult
    curves: Dict[UncertaintyKind, PrecisionCurve]
    correlations: Dict[UncertaintyKind, np.ndarray]
    ood: Optional[OODReport]
    class_names: List[str]

    def summary(self) -> EvaluationSummary:
        classes = [
            ClassIoU(
                name=name,
                iou=float(self.iou.per_class[c]),
                absent=bool(self.iou.absent[c]),
                true_positives=int(self.counts.tp[c]),
                false_positives=int(self.counts.fp[c]),
                false_negatives=int(self.counts.fn[c]),
            )
            for c, name in enumerate(self.class_names)
        ]
        curves = []
        for kind, curve in self.curves.items():
            for c, name in enumerate(self.class_names):
                curves.append(CurveRecord(
                    kind=kind,
                    class_name=name,
                    empty=bool(curve.empty[c]),
                    quantiles=[float(q) for q in curve.quantiles],
                    thresholds=[None if math.isnan(t) else float(t) for t in curve.thresholds[c]],
                    precision=[None if math.isnan(p) else float(p) for p in curve.precision[c]],
                    support=[int(s) for s in curve.support[c]],
                    spearman=float(self.correlations[kind][c]),
                ))
        return EvaluationSummary(
            variant=self.variant,
            split=self.split,
            scenes=self.scenes,
            mc_samples=self.mc_samples,
            visible_cells=int(self.counts.tp.sum() + self.counts.fp.sum()),
            miou=self.iou.mean,
            classes=classes,
            curves=curves,
            ood=self.ood,
        )


# ============================================================================
# Service
# ============================================================================

def _visible(pred: np.ndarray, labels: np.ndarray, weights: np.ndarray) -> np.ndarray:
    pred, labels, weights = np.asarray(pred), np.asarray(labels), np.asarray(weights)
    if not pred.shape == labels.shape == weights.shape:
        raise ShapeError("prediction, label and weight grids differ", [pred.shape, labels.shape, weights.shape])
    return weights > 0


class MetricsService:
    """Service for evaluation metrics"""

    @staticmethod
    def confusion_counts(
        pred: np.ndarray,
        labels: np.ndarray,
        weights: np.ndarray,
        num_classes: int = len(CLASS_NAMES),
    ) -> ConfusionCounts:
        """Per-class TP/FP/FN over cells with weight > 0"""
        visible = _visible(pred, labels, weights)
        p = np.asarray(pred)[visible].astype(np.int64)
        t = np.asarray(labels)[visible].astype(np.int64)
        hit = p == t
        return ConfusionCounts(
            tp=np.bincount(t[hit], minlength=num_classes)[:num_classes],
            fp=np.bincount(p[~hit], minlength=num_classes)[:num_classes],
            fn=np.bincount(t[~hit], minlength=num_classes)[:num_classes],
        )

    @staticmethod
    def iou(counts: ConfusionCounts) -> IoUResult:
        """IoU_c = TP / (TP + FP + FN), 0 and flagged absent when the denominator is 0"""
        denom = counts.tp + counts.fp + counts.fn
        per_class = np.divide(counts.tp, denom, out=np.zeros(len(denom)), where=denom > 0)
        return IoUResult(per_class=per_class, absent=denom == 0, mean=float(per_class.mean()))

    @staticmethod
    def uncertainty_precision_curve(
        pred: np.ndarray,
        uncertainty: np.ndarray,
        labels: np.ndarray,
        weights: np.ndarray,
        kind: UncertaintyKind,
        num_classes: int = len(CLASS_NAMES),
        n_quantiles: int = N_QUANTILES,
    ) -> PrecisionCurve:
        """
        Precision of each class's predictions at or below its uncertainty quantiles.

        Thresholds are nearest-rank quantiles of the uncertainty over the
        visible cells predicted as that class.
        """
        visible = _visible(pred, labels, weights)
        if np.asarray(uncertainty).shape != visible.shape:
            raise ShapeError("uncertainty grid differs from prediction grid", [np.shape(uncertainty), visible.shape])
        p = np.asarray(pred)[visible]
        t = np.asarray(labels)[visible]
        u = np.asarray(uncertainty, dtype=np.float64)[visible]
        quantiles = np.arange(1, n_quantiles + 1) / n_quantiles
        thresholds = np.full((num_classes, n_quantiles), np.nan)
        precision = np.full((num_classes, n_quantiles), np.nan)
        support = np.zeros((num_classes, n_quantiles), dtype=np.int64)
        empty = np.zeros(num_classes, dtype=bool)
        for c in range(num_classes):
            mine = p == c
            if not mine.any():
                empty[c] = True
                continue
            values = u[mine]
            correct = t[mine] == c
            ordered = np.sort(values)
            ranks = (np.arange(1, n_quantiles + 1) * len(ordered) + n_quantiles - 1) // n_quantiles
            for k, rank in enumerate(ranks):
                threshold = ordered[max(rank, 1) - 1]
                selected = values <= threshold
                thresholds[c, k] = threshold
                support[c, k] = int(selected.sum())
                precision[c, k] = float(correct[selected].mean())
        return PrecisionCurve(kind, quantiles, thresholds, precision, support, empty)

    @staticmethod
    def certainty_precision_correlation(curve: PrecisionCurve) -> np.ndarray:
        """
        Spearman correlation of certainty (most certain quantile first) and precision.

        Constant precision and empty classes give 0.
        """
        certainty = -np.arange(curve.precision.shape[1], dtype=np.float64)
        out = np.zeros(curve.precision.shape[0])
        for c in range(len(out)):
            precision = curve.precision[c]
            if curve.empty[c] or np.all(precision == precision[0]):
                continue
            rho = spearmanr(certainty, precision).statistic
            out[c] = 0.0 if rho is None or math.isnan(rho) else float(rho)
        return out

    # ------------------------------------------------------------------
    # Weights
    # ------------------------------------------------------------------

    @staticmethod
    def _network(source: Union[Network, Checkpoint]) -> Network:
        return source.network if isinstance(source, Checkpoint) else source

    @staticmethod
    def _variational(net: Network, layer: str) -> VariationalConv:
        conv = net.layer(layer)
        if not conv.variational:
            raise NotVariationalError(f"layer {layer} of the {net.variant.value} network has point weights")
        return conv

    @staticmethod
    def weight_density_stats(
        source: Union[Network, Checkpoint], layer: str = "head", bins: int = DENSITY_BINS
    ) -> WeightDensity:
        """Histograms of mu and sigma = softplus(rho) over a layer's weights and biases"""
        conv = MetricsService._variational(MetricsService._network(source), layer)
        mu = np.concatenate([conv.weight.mu.data.ravel(), conv.bias.mu.data.ravel()]).astype(np.float64)
        sigma = np.concatenate([conv.weight.sigma.ravel(), conv.bias.sigma.ravel()]).astype(np.float64)
        mu_counts, mu_edges = np.histogram(mu, bins=bins)
        sigma_counts, sigma_edges = np.histogram(sigma, bins=bins)
        p10, p90 = np.percentile(sigma, [10, 90])
        return WeightDensity(layer, mu_counts, mu_edges, sigma_counts, sigma_edges, float(p10), float(p90))

    @staticmethod
    def weight_snr_stats(
        source: Union[Network, Checkpoint], layers: Optional[Sequence[str]] = None
    ) -> List[LayerSNR]:
        """Quantiles of |mu| / sigma per variational layer"""
        net = MetricsService._network(source)
        convs = (
            [MetricsService._variational(net, name) for name in layers]
            if layers is not None else net.variational_layers()
        )
        if not convs:
            raise NotVariationalError(f"the {net.variant.value} network has no variational layers")
        stats = []
        for conv in convs:
            snr = np.concatenate([
                np.abs(vp.mu.data).ravel() / vp.sigma.ravel() for vp in (conv.weight, conv.bias)
            ]).astype(np.float64)
            p10, p50, p90 = np.percentile(snr, [10, 50, 90])
            stats.append(LayerSNR(conv.name, int(snr.size), float(p10), float(p50), float(p90)))
        return stats

    # ------------------------------------------------------------------
    # OOD response
    # ------------------------------------------------------------------

    @staticmethod
    def cell_centers(spec: GridSpec):
        rows = (np.arange(spec.c_l) + 0.5) * spec.cell_size - spec.length_m / 2
        cols = (np.arange(spec.c_w) + 0.5) * spec.cell_size - spec.width_m / 2
        return np.meshgrid(rows, cols, indexing="ij")

    @staticmethod
    def ood_response(
        dataset: SceneDataset,
        maps: Sequence[UncertaintyMaps],
        radius: float = OOD_RADIUS,
        free_class: int = 0,
    ) -> Optional[OODReport]:
        """
        Mean H_e and H_a over visible cells within `radius` of an OOD object,
        relative to the same means over the other visible free cells.

        None when the split holds no OOD object near a visible cell.
        """
        cx, cy = MetricsService.cell_centers(dataset.manifest.grid)
        near_e, near_a, free_e, free_a = [], [], [], []
        for scene, scene_maps, labels, weights in zip(dataset.scenes, maps, dataset.labels, dataset.weights):
            near = np.zeros(cx.shape, dtype=bool)
            for obj in scene.ood_objects:
                near |= np.hypot(cx - obj.x, cy - obj.y) <= radius
            visible = weights > 0
            near &= visible
            free = visible & (labels == free_class) & ~near
            near_e.append(scene_maps.epistemic[near])
            near_a.append(scene_maps.aleatoric[near])
            free_e.append(scene_maps.epistemic[free])
            free_a.append(scene_maps.aleatoric[free])
        near_e, near_a = np.concatenate(near_e), np.concatenate(near_a)
        free_e, free_a = np.concatenate(free_e), np.concatenate(free_a)
        if near_e.size == 0 or free_e.size == 0:
            return None

        def ratio(a: np.ndarray, b: np.ndarray) -> float:
            return float(a.mean() / max(b.mean(), 1e-12))

        return OODReport(
            near_cells=int(near_e.size),
            free_cells=int(free_e.size),
            epistemic_ratio=ratio(near_e, free_e),
            aleatoric_ratio=ratio(near_a, free_a),
        )

    # ------------------------------------------------------------------
    # Dataset evaluation
    # ------------------------------------------------------------------

    @staticmethod
    def evaluate(
        net: Network,
        dataset: SceneDataset,
        n_samples: int,
        rng: np.random.Generator,
        threads: int = 1,
        split: str = "test",
    ) -> EvaluationReport:
        """MC-predict every scene, then compute all metrics over visible cells"""
        if len(dataset) == 0:
            raise ConfigurationError("cannot evaluate an empty split")
        num_classes = net.cfg.num_classes
        maps: List[UncertaintyMaps] = []
        streams = rng.spawn(math.ceil(len(dataset) / EVAL_BATCH))
        for b, stream in enumerate(streams):
            features = dataset.features[b * EVAL_BATCH: (b + 1) * EVAL_BATCH]
            stacks = UncertaintyService.mc_predict_batch(net, features, n_samples, stream, threads)
            maps.extend(UncertaintyService.decompose(stack) for stack in stacks)

        pred = np.stack([m.predicted for m in maps])
        counts = MetricsService.confusion_counts(pred, dataset.labels, dataset.weights, num_classes)
        curves = {
            UncertaintyKind.EPISTEMIC: MetricsService.uncertainty_precision_curve(
                pred, np.stack([m.epistemic for m in maps]), dataset.labels, dataset.weights,
                UncertaintyKind.EPISTEMIC, num_classes),
            UncertaintyKind.ALEATORIC: MetricsService.uncertainty_precision_curve(
                pred, np.stack([m.aleatoric for m in maps]), dataset.labels, dataset.weights,
                UncertaintyKind.ALEATORIC, num_classes),
        }
        iou = MetricsService.iou(counts)
        logger.info("evaluated %d scenes of split %s: mIoU %.4f", len(dataset), split, iou.mean)
        return EvaluationReport(
            variant=net.variant.value,
            split=split,
            scenes=len(dataset),
            mc_samples=n_samples if net.is_stochastic else 1,
            counts=counts,
            iou=iou,
            curves=curves,
            correlations={k: MetricsService.certainty_precision_correlation(c) for k, c in curves.items()},
            ood=MetricsService.ood_response(dataset, maps),
            class_names=list(dataset.manifest.class_names),
        )
