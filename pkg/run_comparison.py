#!/usr/bin/env python3
"""
Variant comparison script.

This script:
1. Trains all four network variants on one dataset directory
2. Evaluates each on the test split over visible cells
3. Prints mIoU, per-class IoU and parameter counts side by side

Generate a dataset first, then run:
    uv run gridbayes gen --out data/
    uv run python run_comparison.py data/ --epochs 30 --seeds 5
"""

import argparse
import logging
from typing import Dict, List

import numpy as np
from rich.console import Console
from rich.logging import RichHandler
from rich.table import Table

from gridbayes.models import Variant
from gridbayes.schemas import TrainConfig
from gridbayes.services import DatasetService, MetricsService, TrainingService

console = Console()


def compare(data: str, epochs: int, seeds: int, mc_samples: int, threads: int) -> Dict[Variant, dict]:
    """Train and evaluate every variant; returns per-variant metric lists and counts"""
    train = DatasetService.load_dataset(data, "train")
    test = DatasetService.load_dataset(data, "test")
    results: Dict[Variant, dict] = {}
    for variant in Variant:
        mious: List[float] = []
        per_class: List[np.ndarray] = []
        conv_params = 0
        for seed in range(seeds):
            console.print(f"[bold]{variant.value}[/] seed {seed}")
            cfg = TrainConfig(variant=variant, epochs=epochs, seed=seed)
            ckpt = TrainingService.train(train, cfg)
            report = MetricsService.evaluate(ckpt.network, test, mc_samples, np.random.default_rng(seed), threads)
            mious.append(report.iou.mean)
            per_class.append(report.iou.per_class)
            conv_params = ckpt.network.conv_parameter_count()
        results[variant] = {
            "miou": mious,
            "per_class": np.mean(per_class, axis=0),
            "conv_params": conv_params,
            "class_names": list(test.manifest.class_names),
        }
    return results


def print_table(results: Dict[Variant, dict]) -> None:
    class_names = next(iter(results.values()))["class_names"]
    baseline = results[Variant.DETERMINISTIC]["conv_params"]
    table = Table(title="variant comparison (test split, visible cells)")
    table.add_column("variant")
    table.add_column("mIoU", justify="right")
    table.add_column("std", justify="right")
    for name in class_names:
        table.add_column(name, justify="right")
    table.add_column("conv params", justify="right")
    table.add_column("x deterministic", justify="right")
    for variant, res in results.items():
        table.add_row(
            variant.value,
            f"{np.mean(res['miou']):.4f}",
            f"{np.std(res['miou']):.4f}",
            *(f"{v:.4f}" for v in res["per_class"]),
            str(res["conv_params"]),
            f"{res['conv_params'] / baseline:.3f}",
        )
    console.print(table)


def main():
    parser = argparse.ArgumentParser(description="Train and compare all network variants.")
    parser.add_argument("data", help="Dataset directory written by `gridbayes gen`.")
    parser.add_argument("--epochs", type=int, default=30)
    parser.add_argument("--seeds", type=int, default=5, help="Training repetitions per variant.")
    parser.add_argument("--mc-samples", type=int, default=30)
    parser.add_argument("--threads", type=int, default=1)
    args = parser.parse_args()

    logging.basicConfig(level=logging.WARNING, format="%(message)s", handlers=[RichHandler(show_path=False)])
    print_table(compare(args.data, args.epochs, args.seeds, args.mc_samples, args.threads))


if __name__ == "__main__":
    main()
