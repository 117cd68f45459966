"""
gridbayes command line.

Subcommands:
- gen: write a synthetic dataset directory
- train: fit one network variant, optionally over several seeds
- predict: uncertainty maps, CSVs and images for one scene
- eval: IoU and uncertainty-precision curves over a split
- prune: drop the variational weights with the lowest signal-to-noise ratio
- info: checkpoint summary
- serve: REST inference service

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
from pydantic import ValidationError
from rich.console import Console
from rich.logging import RichHandler
from rich.progress import Progress
from rich.table import Table

from . import __version__
from .errors import ConfigurationError, GridBayesError, NotVariationalError
from .models import CLASS_NAMES, Variant
from .schemas import PriorConfig, RunConfig, ScenarioConfig, TrainConfig
from .services import (
    CheckpointService,
    DatasetService,
    MetricsService,
    RenderService,
    TrainingService,
    UncertaintyService,
    WorldService,
)

logger = logging.getLogger(__name__)

THREADS_ENV = "GRIDBAYES_THREADS"

console = Console()
err_console = Console(stderr=True)


def setup_logging(verbose: bool = False) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(console=err_console, show_path=False)],
    )


# ============================================================================
# Argument parsing
# ============================================================================

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, help="Random seed (gen: overrides the scenario seed).")
    common.add_argument("--threads", type=int, help=f"Worker threads (default: ${THREADS_ENV} or 1).")
    common.add_argument("--print-config", action="store_true", help="Print the resolved configuration and exit.")
    common.add_argument("-v", "--verbose", action="store_true", help="Debug logging.")

    parser = argparse.ArgumentParser(prog="gridbayes", description="Bayesian grid segmentation of radar data.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    gen = sub.add_parser("gen", parents=[common], help="Generate a synthetic dataset.")
    gen.add_argument("--config", help="ScenarioConfig JSON file.")
    gen.add_argument("--train", dest="n_train", type=int, help="Training scenes (default 512).")
    gen.add_argument("--test", dest="n_test", type=int, help="Test scenes (default 128).")
    gen.add_argument("--out", help="Dataset directory.")

    train = sub.add_parser("train", parents=[common], help="Train a network variant.")
    train.add_argument("--data", help="Dataset directory.")
    train.add_argument("--variant", choices=[v.value for v in Variant])
    train.add_argument("--epochs", type=int)
    train.add_argument("--lr", type=float)
    train.add_argument("--batch", dest="batch_size", type=int)
    train.add_argument("--prior-gamma", type=float, help="Prior variance of variational weights.")
    train.add_argument("--repeat", type=int, help="Train this many seeds and report mean test mIoU.")
    train.add_argument("--mc-samples", type=int, help="MC samples for the --repeat evaluation.")
    train.add_argument("--out", help="Checkpoint path.")

    predict = sub.add_parser("predict", parents=[common], help="Predict one scene with uncertainty maps.")
    predict.add_argument("--ckpt", dest="checkpoint")
    predict.add_argument("--scene", help="Scene JSON file.")
    predict.add_argument("--mc-samples", type=int)
    predict.add_argument("--scale", type=int, help="Pixels per cell.")
    predict.add_argument("--out", help="Output directory.")

    ev = sub.add_parser("eval", parents=[common], help="Evaluate a checkpoint on a dataset split.")
    ev.add_argument("--ckpt", dest="checkpoint")
    ev.add_argument("--data", help="Dataset directory.")
    ev.add_argument("--split")
    ev.add_argument("--mc-samples", type=int)
    ev.add_argument("--visible-only", action="store_true", default=True,
                    help="Count only cells with observability weight > 0 (always on).")
    ev.add_argument("--no-visible-only", action="store_true", help=argparse.SUPPRESS)
    ev.add_argument("--out", help="Output directory.")

    prune = sub.add_parser("prune", parents=[common], help="Prune low signal-to-noise variational weights.")
    prune.add_argument("--ckpt", dest="checkpoint")
    prune.add_argument("--prune-fraction", type=float)
    prune.add_argument("--out", help="Pruned checkpoint path.")

    info = sub.add_parser("info", parents=[common], help="Describe a checkpoint.")
    info.add_argument("--ckpt", dest="checkpoint")

    serve = sub.add_parser("serve", parents=[common], help="Serve a checkpoint over HTTP.")
    serve.add_argument("--ckpt", dest="checkpoint")
    serve.add_argument("--host")
    serve.add_argument("--port", type=int)
    return parser


def resolve_run_config(args: argparse.Namespace, parser: argparse.ArgumentParser) -> RunConfig:
    """Merge flags and environment into a RunConfig; problems are usage errors"""
    if getattr(args, "no_visible_only", False):
        parser.error("--no-visible-only is not allowed: metrics only count cells with observability weight > 0")
    values = {k: v for k, v in vars(args).items() if k in RunConfig.model_fields and v is not None}
    if "threads" not in values and os.environ.get(THREADS_ENV):
        try:
            values["threads"] = int(os.environ[THREADS_ENV])
        except ValueError:
            parser.error(f"${THREADS_ENV} must be an integer, got {os.environ[THREADS_ENV]!r}")
    try:
        return RunConfig(**values)
    except ValidationError as exc:
        error = exc.errors()[0]
        where = ".".join(str(p) for p in error["loc"]) or args.subcommand
        parser.error(f"{where}: {error['msg']}")


def load_scenario(path: Optional[str]) -> ScenarioConfig:
    if path is None:
        return ScenarioConfig()
    try:
        return ScenarioConfig.model_validate_json(Path(path).read_text())
    except ValidationError as exc:
        raise ConfigurationError(f"invalid scenario config {path}: {exc.error_count()} validation errors") from exc


def repeat_path(out: Path, k: int) -> Path:
    """<out>.r<k>.ckpt for run k of --repeat"""
    return out.with_name(f"{out.stem}.r{k}{out.suffix or '.ckpt'}")


# ============================================================================
# Subcommands
# ============================================================================

def cmd_gen(run: RunConfig) -> None:
    cfg = load_scenario(run.config)
    if run.seed is not None:
        cfg = cfg.model_copy(update={"seed": run.seed})
    manifest = WorldService.generate_dataset(cfg, run.n_train, run.n_test, run.out, run.threads)
    console.print(
        f"wrote {len(manifest.splits['train'])} train and {len(manifest.splits['test'])} test scenes to {run.out}"
    )


def cmd_train(run: RunConfig) -> None:
    dataset = DatasetService.load_dataset(run.data, "train")
    base = TrainConfig(
        variant=run.variant,
        epochs=run.epochs,
        lr=run.lr,
        batch_size=run.batch_size,
        seed=run.seed or 0,
    )
    prior = PriorConfig(gamma=run.prior_gamma)
    out = Path(run.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    test = DatasetService.load_dataset(run.data, "test") if run.repeat > 1 else None

    mious: List[float] = []
    for k in range(run.repeat):
        cfg = base.model_copy(update={"seed": base.seed + k})
        network_cfg = TrainingService.network_config_for(dataset, cfg, prior)
        with Progress(console=err_console, transient=True) as progress:
            task = progress.add_task(f"{cfg.variant.value} seed {cfg.seed}", total=cfg.epochs)
            ckpt = TrainingService.train(
                dataset, cfg, network_cfg=network_cfg, callback=lambda _: progress.advance(task)
            )
        path = out if run.repeat == 1 else repeat_path(out, k)
        CheckpointService.save_checkpoint(ckpt, path)
        RenderService.write_history_csv(ckpt.history, path.with_suffix(".history.csv"))
        last = ckpt.history[-1]
        console.print(f"{path}: loss {last.loss:.4f}, nll {last.nll:.4f}, kl {last.kl:.2f}")
        if test is not None:
            rng = np.random.default_rng(cfg.seed)
            report = MetricsService.evaluate(ckpt.network, test, run.mc_samples, rng, run.threads)
            mious.append(report.iou.mean)

    if mious:
        table = Table(title=f"{run.variant.value}: test mIoU over {run.repeat} seeds")
        table.add_column("seed", justify="right")
        table.add_column("mIoU", justify="right")
        for k, miou in enumerate(mious):
            table.add_row(str(base.seed + k), f"{miou:.4f}")
        table.add_row("mean", f"{float(np.mean(mious)):.4f}")
        console.print(table)


def cmd_predict(run: RunConfig) -> None:
    ckpt = CheckpointService.load_checkpoint(run.checkpoint)
    spec = ckpt.grid_spec()
    scene = DatasetService.load_scene(run.scene, spec)
    features = DatasetService.scene_features(scene, spec, ckpt.feature_ranges)
    rng = np.random.default_rng(run.seed or 0)
    stack, maps = UncertaintyService.predict_maps(ckpt.network, features, run.mc_samples, rng, run.threads)

    out = Path(run.out)
    num_classes = ckpt.network.cfg.num_classes
    RenderService.write_prediction_images(maps, out, num_classes, run.scale)
    RenderService.write_uncertainty_csv(maps, out / "uncertainty.csv")
    RenderService.write_probability_csv(stack.mean, CLASS_NAMES[:num_classes], out / "probabilities.csv")
    console.print(
        f"{scene.name}: {stack.n} samples, mean H_p {maps.predictive.mean():.4f}, "
        f"H_a {maps.aleatoric.mean():.4f}, H_e {maps.epistemic.mean():.4f} nats -> {out}"
    )


def cmd_eval(run: RunConfig) -> None:
    ckpt = CheckpointService.load_checkpoint(run.checkpoint)
    dataset = DatasetService.load_dataset(run.data, run.split)
    rng = np.random.default_rng(run.seed or 0)
    report = MetricsService.evaluate(ckpt.network, dataset, run.mc_samples, rng, run.threads, split=run.split)
    summary = report.summary()

    out = Path(run.out)
    out.mkdir(parents=True, exist_ok=True)
    RenderService.write_summary_json(summary, out / "metrics.json")
    RenderService.write_iou_csv(summary, out / "iou.csv")
    RenderService.write_curves_csv(summary, out / "curves.csv")

    table = Table(title=f"{summary.variant.value} on {summary.split} ({summary.scenes} scenes)")
    for column in ("class", "IoU", "TP", "FP", "FN"):
        table.add_column(column, justify="left" if column == "class" else "right")
    for cls in summary.classes:
        iou = "absent" if cls.absent else f"{cls.iou:.4f}"
        table.add_row(cls.name, iou, str(cls.true_positives), str(cls.false_positives), str(cls.false_negatives))
    table.add_row("mIoU", f"{summary.miou:.4f}", "", "", "")
    console.print(table)
    if summary.ood is not None:
        console.print(
            f"OOD cells: H_e ratio {summary.ood.epistemic_ratio:.2f}, H_a ratio {summary.ood.aleatoric_ratio:.2f}"
        )


def cmd_prune(run: RunConfig) -> None:
    ckpt = CheckpointService.load_checkpoint(run.checkpoint)
    count = ckpt.network.prune_low_snr(run.prune_fraction)
    out = Path(run.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    CheckpointService.save_checkpoint(ckpt, out)
    console.print(f"pruned {count} variational weights -> {out}")


def cmd_info(run: RunConfig) -> None:
    ckpt = CheckpointService.load_checkpoint(run.checkpoint)
    net = ckpt.network
    cfg = net.cfg
    table = Table(title=str(run.checkpoint), show_header=False)
    table.add_row("variant", cfg.variant.value)
    table.add_row("grid", f"{cfg.c_l} x {cfg.c_w}")
    table.add_row("ASPP", f"{cfg.aspp_layers} blocks, dilations {cfg.dilations}, {cfg.branch_channels} channels")
    table.add_row("parameters", str(net.parameter_count()))
    table.add_row("conv parameters", str(net.conv_parameter_count()))
    table.add_row("prior gamma", f"{cfg.prior.gamma:g}")
    table.add_row("epochs trained", str(len(ckpt.history)))
    if ckpt.history:
        last = ckpt.history[-1]
        table.add_row("last epoch", f"loss {last.loss:.4f}, nll {last.nll:.4f}, kl {last.kl:.2f}")
    console.print(table)

    try:
        snr = MetricsService.weight_snr_stats(net)
    except NotVariationalError:
        return
    snr_table = Table(title="weight signal-to-noise |mu| / sigma")
    for column in ("layer", "weights", "p10", "p50", "p90"):
        snr_table.add_column(column, justify="left" if column == "layer" else "right")
    for layer in snr:
        snr_table.add_row(layer.layer, str(layer.count), f"{layer.p10:.3g}", f"{layer.p50:.3g}", f"{layer.p90:.3g}")
    console.print(snr_table)


def cmd_serve(run: RunConfig) -> None:
    import uvicorn

    from .rest.main import create_app

    uvicorn.run(create_app(run.checkpoint), host=run.host, port=run.port)


COMMANDS: Dict[str, Callable[[RunConfig], None]] = {
    "gen": cmd_gen,
    "train": cmd_train,
    "predict": cmd_predict,
    "eval": cmd_eval,
    "prune": cmd_prune,
    "info": cmd_info,
    "serve": cmd_serve,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.verbose)
    run = resolve_run_config(args, parser)
    if args.print_config:
        print(run.model_dump_json(indent=2))
        return 0
    try:
        COMMANDS[run.subcommand](run)
    except (GridBayesError, OSError) as exc:
        logger.debug("%s failed", run.subcommand, exc_info=True)
        err_console.print(f"error: {exc}", style="bold red", markup=False, highlight=False)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
