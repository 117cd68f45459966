"""
Training service - optimizes the network variants.

Objectives:
- deterministic / mc-dropout: observability-weighted cross-entropy
- probabilistic / hybrid: ELBO = KL / n_batches + weighted NLL

One weight sample per step, epoch-shuffled batches, Adam without schedule,
decay or augmentation. A non-finite loss term aborts training.
"""

from __future__ import annotations

import logging
import math
from typing import Callable, List, Optional, Union

import numpy as np

from ..errors import ConfigurationError, NoObservableCellsError, NonFiniteError, TrainingDivergedError
from ..models import ForwardMode
from ..network import build_network
from ..schemas import EpochRecord, NetworkConfig, PriorConfig, TrainConfig
from ..tensor import AdamState, Tensor, adam_step, backward, weighted_nll
from .checkpoint_service import Checkpoint
from .dataset_service import SceneDataset

logger = logging.getLogger(__name__)

EpochCallback = Callable[[EpochRecord], None]


def elbo_loss(nll: Union[Tensor, float], kl_total: Union[Tensor, float], n_batches: int) -> Union[Tensor, float]:
    """kl_total / n_batches + nll"""
    if n_batches < 1:
        raise ConfigurationError(f"n_batches must be >= 1, got {n_batches}")
    if isinstance(nll, Tensor) or isinstance(kl_total, Tensor):
        kl = kl_total if isinstance(kl_total, Tensor) else Tensor(kl_total)
        return kl * (1.0 / n_batches) + nll
    return kl_total / n_batches + nll


class TrainingService:
    """Service for the training loop"""

    @staticmethod
    def network_config_for(dataset: SceneDataset, cfg: TrainConfig, prior: Optional[PriorConfig] = None) -> NetworkConfig:
        grid = dataset.manifest.grid
        return NetworkConfig(
            variant=cfg.variant,
            c_l=grid.c_l,
            c_w=grid.c_w,
            f_in=dataset.features.shape[1],
            num_classes=len(dataset.manifest.class_names),
            prior=prior or PriorConfig(),
        )

    @staticmethod
    def train(
        dataset: SceneDataset,
        cfg: TrainConfig,
        rng: Optional[np.random.Generator] = None,
        network_cfg: Optional[NetworkConfig] = None,
        callback: Optional[EpochCallback] = None,
    ) -> Checkpoint:
        """
        Train a fresh network on `dataset` and return it as a checkpoint.

        The rng (default: seeded from cfg.seed) is split into independent
        streams for initialization, shuffling and weight sampling, so two
        runs with the same seed produce identical checkpoints.
        """
        if len(dataset) == 0:
            raise ConfigurationError("training needs at least one scene")
        if not np.any(dataset.weights > 0):
            raise NoObservableCellsError("no observable cells in the training set")
        network_cfg = network_cfg or TrainingService.network_config_for(dataset, cfg)
        if network_cfg.variant != cfg.variant:
            raise ConfigurationError(
                f"network variant {network_cfg.variant.value} differs from training variant {cfg.variant.value}"
            )

        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        init_rng, shuffle_rng, sample_rng = rng.spawn(3)
        net = build_network(network_cfg, init_rng)
        params = net.parameters()
        names = list(params)
        state = AdamState(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps)
        variational = bool(net.variational_layers())
        mode = ForwardMode.SAMPLE if net.is_stochastic else ForwardMode.MEAN
        n_batches = math.ceil(len(dataset) / cfg.batch_size)
        history: List[EpochRecord] = []

        logger.info(
            "training %s network (%d parameters) on %d scenes, %d batches per epoch",
            cfg.variant.value, net.parameter_count(), len(dataset), n_batches,
        )
        for epoch in range(1, cfg.epochs + 1):
            order = shuffle_rng.permutation(len(dataset))
            losses, nlls, kls = [], [], []
            for b in range(n_batches):
                x, labels, weights = dataset.batch(order[b * cfg.batch_size: (b + 1) * cfg.batch_size])
                if not weights.sum() > 0:
                    logger.debug("epoch %d batch %d has no observable cells, skipped", epoch, b)
                    continue

                nll_terms, kl = [], None
                for _ in range(cfg.train_samples):
                    try:
                        probs, kl = net.forward(x, mode, sample_rng, training=True)
                    except NonFiniteError as exc:
                        logger.error("forward pass diverged at epoch %d batch %d: %s", epoch, b, exc)
                        raise TrainingDivergedError(epoch, b, "forward") from exc
                    nll_terms.append(weighted_nll(probs, labels, weights))
                nll = nll_terms[0]
                for term in nll_terms[1:]:
                    nll = nll + term
                if len(nll_terms) > 1:
                    nll = nll * (1.0 / len(nll_terms))

                nll_value, kl_value = nll.item(), kl.item()
                for term, value in (("nll", nll_value), ("kl", kl_value)):
                    if not math.isfinite(value):
                        logger.error("non-finite %s at epoch %d batch %d", term, epoch, b)
                        raise TrainingDivergedError(epoch, b, term, value)

                loss = elbo_loss(nll, kl, n_batches) if variational else nll
                grads = backward(loss, wrt=[params[n] for n in names])
                try:
                    adam_step(params, dict(zip(names, grads)), state)
                except NonFiniteError as exc:
                    logger.error("non-finite gradient at epoch %d batch %d: %s", epoch, b, exc)
                    raise TrainingDivergedError(epoch, b, f"gradient of {exc.name}") from exc

                losses.append(elbo_loss(nll_value, kl_value, n_batches) if variational else nll_value)
                nlls.append(nll_value)
                kls.append(kl_value)

            if not losses:
                raise NoObservableCellsError(f"epoch {epoch} saw no observable cells")
            record = EpochRecord(
                epoch=epoch,
                loss=float(np.mean(losses)),
                nll=float(np.mean(nlls)),
                kl=float(np.mean(kls)),
                batches=n_batches,
            )
            history.append(record)
            logger.info("epoch %d/%d loss=%.4f nll=%.4f kl=%.2f", epoch, cfg.epochs, record.loss, record.nll, record.kl)
            if callback is not None:
                callback(record)

        return Checkpoint(
            network=net,
            train=cfg,
            history=history,
            optimizer=state,
            feature_ranges=list(dataset.manifest.feature_ranges),
            grid=dataset.manifest.grid,
        )
