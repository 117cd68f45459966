"""
Render service - images and flat files for predictions and metrics.

Outputs:
- Binary PPM (P6) class images, optionally darkened by an entropy map
- CSV exports of uncertainty maps, training history, IoU and precision curves
- JSON evaluation summaries

Images put the front-most grid row on top; one pixel per cell times `scale`.
"""

from __future__ import annotations

import csv
import logging
import math
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from ..errors import ConfigurationError, ShapeError
from ..models import CellClass
from ..schemas import EpochRecord, EvaluationSummary
from .uncertainty_service import UncertaintyMaps

logger = logging.getLogger(__name__)

CLASS_COLORS: Dict[int, Tuple[int, int, int]] = {
    CellClass.FREE: (0, 170, 0),
    CellClass.OCCUPIED: (255, 215, 0),
    CellClass.MOVING: (220, 0, 0),
    CellClass.UNKNOWN: (128, 128, 128),
}


class RenderService:
    """Service for image and table output"""

    @staticmethod
    def darkening(entropy: np.ndarray, num_classes: int) -> np.ndarray:
        """1 - H / ln C, clipped to [0, 1]"""
        return np.clip(1.0 - np.asarray(entropy, dtype=np.float64) / math.log(num_classes), 0.0, 1.0)

    @staticmethod
    def class_image(
        predicted: np.ndarray,
        entropy: Optional[np.ndarray] = None,
        num_classes: int = len(CLASS_COLORS),
        scale: int = 1,
    ) -> np.ndarray:
        """rows x cols x 3 uint8 image of a class grid"""
        predicted = np.asarray(predicted)
        if predicted.ndim != 2:
            raise ShapeError("class grid must be two-dimensional", [predicted.shape])
        if scale < 1:
            raise ConfigurationError(f"scale must be >= 1, got {scale}")
        palette = np.zeros((max(CLASS_COLORS) + 1, 3), dtype=np.float64)
        for cls, color in CLASS_COLORS.items():
            palette[int(cls)] = color
        rgb = palette[np.clip(predicted, 0, len(palette) - 1)]
        if entropy is not None:
            if np.shape(entropy) != predicted.shape:
                raise ShapeError("entropy grid differs from class grid", [np.shape(entropy), predicted.shape])
            rgb = rgb * RenderService.darkening(entropy, num_classes)[..., None]
        image = np.round(rgb).astype(np.uint8)[::-1]
        if scale > 1:
            image = image.repeat(scale, axis=0).repeat(scale, axis=1)
        return image

    @staticmethod
    def encode_ppm(image: np.ndarray) -> bytes:
        image = np.ascontiguousarray(image, dtype=np.uint8)
        if image.ndim != 3 or image.shape[2] != 3:
            raise ShapeError("PPM images are rows x cols x 3", [image.shape])
        height, width = image.shape[:2]
        return f"P6\n{width} {height}\n255\n".encode("ascii") + image.tobytes()

    @staticmethod
    def write_ppm(image: np.ndarray, path: Path | str) -> Path:
        path = Path(path)
        path.write_bytes(RenderService.encode_ppm(image))
        return path

    @staticmethod
    def write_prediction_images(
        maps: UncertaintyMaps,
        out_dir: Path | str,
        num_classes: int,
        scale: int = 1,
    ) -> Dict[str, Path]:
        """prediction.ppm, epistemic.ppm and aleatoric.ppm"""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        images = {
            "prediction": RenderService.class_image(maps.predicted, None, num_classes, scale),
            "epistemic": RenderService.class_image(maps.predicted, maps.epistemic, num_classes, scale),
            "aleatoric": RenderService.class_image(maps.predicted, maps.aleatoric, num_classes, scale),
        }
        paths = {name: RenderService.write_ppm(img, out_dir / f"{name}.ppm") for name, img in images.items()}
        logger.info("wrote %d images to %s", len(paths), out_dir)
        return paths

    # ------------------------------------------------------------------
    # Tables
    # ------------------------------------------------------------------

    @staticmethod
    def write_uncertainty_csv(maps: UncertaintyMaps, path: Path | str) -> Path:
        path = Path(path)
        with path.open("w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["row", "col", "h_p", "h_a", "h_e", "predicted_class"])
            for r, c, hp, ha, he, cls in maps.rows():
                writer.writerow([r, c, f"{hp:.6f}", f"{ha:.6f}", f"{he:.6f}", cls])
        return path

    @staticmethod
    def write_probability_csv(mean: np.ndarray, class_names: Sequence[str], path: Path | str) -> Path:
        """Mean class distribution per cell"""
        path = Path(path)
        mean = np.asarray(mean)
        with path.open("w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["row", "col", *(f"p_{name}" for name in class_names)])
            for r in range(mean.shape[0]):
                for c in range(mean.shape[1]):
                    writer.writerow([r, c, *(f"{p:.6f}" for p in mean[r, c])])
        return path

    @staticmethod
    def write_history_csv(history: Sequence[EpochRecord], path: Path | str) -> Path:
        path = Path(path)
        with path.open("w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["epoch", "loss", "nll", "kl", "batches"])
            for rec in history:
                writer.writerow([rec.epoch, f"{rec.loss:.6f}", f"{rec.nll:.6f}", f"{rec.kl:.6f}", rec.batches])
        return path

    @staticmethod
    def write_iou_csv(summary: EvaluationSummary, path: Path | str) -> Path:
        path = Path(path)
        with path.open("w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["class", "iou", "absent", "tp", "fp", "fn"])
            for cls in summary.classes:
                writer.writerow([
                    cls.name, f"{cls.iou:.6f}", int(cls.absent),
                    cls.true_positives, cls.false_positives, cls.false_negatives,
                ])
            writer.writerow(["mean", f"{summary.miou:.6f}", "", "", "", ""])
        return path

    @staticmethod
    def write_curves_csv(summary: EvaluationSummary, path: Path | str) -> Path:
        """One row per (kind, class, quantile); quantiles ascend from the most certain predictions"""
        path = Path(path)
        with path.open("w", newline="") as f:
            f.write("# uncertainty ascending: quantile q keeps predictions with uncertainty <= threshold\n")
            writer = csv.writer(f)
            writer.writerow(["kind", "class", "quantile", "threshold", "precision", "support"])
            for curve in summary.curves:
                for q, t, p, s in zip(curve.quantiles, curve.thresholds, curve.precision, curve.support):
                    writer.writerow([
                        curve.kind.value, curve.class_name, f"{q:.1f}",
                        "" if t is None else f"{t:.6f}",
                        "" if p is None else f"{p:.6f}",
                        s,
                    ])
        return path

    @staticmethod
    def write_summary_json(summary: EvaluationSummary, path: Path | str) -> Path:
        path = Path(path)
        path.write_text(summary.model_dump_json(indent=2))
        return path
