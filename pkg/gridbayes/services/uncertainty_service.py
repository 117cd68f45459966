"""
Uncertainty service - MC prediction and entropy decomposition.

    H_p = H(mean_n p_n)          predictive
    H_a = mean_n H(p_n)          aleatoric
    H_e = H_p - H_a              epistemic

All entropies in nats. Sampled passes draw from independent rng substreams
and are reduced in sample order, so results do not depend on `threads`.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterator, List, Tuple

import numpy as np

from ..errors import ConfigurationError, ShapeError, UncertaintyInconsistencyError
from ..models import ForwardMode
from ..network import Network
from ..tensor import PROB_FLOOR, no_grad

logger = logging.getLogger(__name__)

ENTROPY_TOLERANCE = 1e-7
DEFAULT_MC_SAMPLES = 30


@dataclass
class ProbStack:
    """N sampled c_l x c_w x C class distributions and their mean"""
    samples: np.ndarray
    mean: np.ndarray = field(init=False)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 4 or self.samples.shape[0] < 1:
            raise ShapeError("a probability stack is N x rows x cols x classes with N >= 1", [self.samples.shape])
        self.mean = self.samples.mean(axis=0)

    @property
    def n(self) -> int:
        return self.samples.shape[0]

    @property
    def num_classes(self) -> int:
        return self.samples.shape[-1]


@dataclass
class UncertaintyMaps:
    """Per-cell entropies (nats) and the argmax of the mean distribution"""
    predictive: np.ndarray
    aleatoric: np.ndarray
    epistemic: np.ndarray
    predicted: np.ndarray

    def rows(self) -> Iterator[Tuple[int, int, float, float, float, int]]:
        """(row, col, H_p, H_a, H_e, predicted class) per cell, row-major"""
        height, width = self.predicted.shape
        for r in range(height):
            for c in range(width):
                yield (
                    r, c,
                    float(self.predictive[r, c]),
                    float(self.aleatoric[r, c]),
                    float(self.epistemic[r, c]),
                    int(self.predicted[r, c]),
                )


def _entropy(p: np.ndarray) -> np.ndarray:
    """-sum p ln p over the last axis with 0 ln 0 = 0"""
    p = np.asarray(p, dtype=np.float64)
    terms = np.where(p > 0, p * np.log(np.maximum(p, PROB_FLOOR)), 0.0)
    return -terms.sum(axis=-1)


class UncertaintyService:
    """Service for sampled prediction and uncertainty maps"""

    @staticmethod
    def mc_predict_batch(
        net: Network,
        features: np.ndarray,
        n_samples: int,
        rng: np.random.Generator,
        threads: int = 1,
    ) -> List[ProbStack]:
        """
        One ProbStack per input grid of a B x F x c_l x c_w batch.

        Sample n shares one weight draw across the batch; dropout masks are
        drawn per grid. Deterministic networks get a single pass.
        """
        if n_samples < 1:
            raise ConfigurationError(f"need at least one MC sample, got {n_samples}")
        features = np.asarray(features)
        if features.ndim != 4:
            raise ShapeError("expected a B x F x rows x cols batch", [features.shape])
        if not net.is_stochastic:
            n_samples = 1
        streams = rng.spawn(n_samples)

        def sample(i: int) -> np.ndarray:
            with no_grad():
                probs, _ = net.forward(features, ForwardMode.SAMPLE, streams[i], training=False, cache=False)
            return np.moveaxis(probs.data.astype(np.float64), 1, -1)

        if threads > 1 and n_samples > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                draws = list(pool.map(sample, range(n_samples)))
        else:
            draws = [sample(i) for i in range(n_samples)]
        stacked = np.stack(draws)
        return [ProbStack(stacked[:, b]) for b in range(stacked.shape[1])]

    @staticmethod
    def mc_predict(
        net: Network,
        features: np.ndarray,
        n_samples: int,
        rng: np.random.Generator,
        threads: int = 1,
    ) -> ProbStack:
        """N sampled forward passes for one F x c_l x c_w input"""
        features = np.asarray(features)
        if features.ndim == 3:
            features = features[None]
        if features.shape[0] != 1:
            raise ShapeError("mc_predict takes a single grid; use mc_predict_batch", [features.shape])
        return UncertaintyService.mc_predict_batch(net, features, n_samples, rng, threads)[0]

    @staticmethod
    def predictive_entropy(mean: np.ndarray) -> np.ndarray:
        return _entropy(mean)

    @staticmethod
    def aleatoric_entropy(stack: ProbStack) -> np.ndarray:
        return _entropy(stack.samples).mean(axis=0)

    @staticmethod
    def epistemic_entropy(predictive: np.ndarray, aleatoric: np.ndarray) -> np.ndarray:
        """H_p - H_a, clamped at 0; a deficit beyond the tolerance is an error"""
        if predictive.shape != aleatoric.shape:
            raise ShapeError("entropy grids differ in shape", [predictive.shape, aleatoric.shape])
        diff = predictive - aleatoric
        worst = float(diff.min()) if diff.size else 0.0
        if worst < -ENTROPY_TOLERANCE:
            logger.error("aleatoric entropy exceeds predictive entropy by %.3g", -worst)
            raise UncertaintyInconsistencyError(
                f"aleatoric entropy exceeds predictive entropy by {-worst:.3g} nats"
            )
        return np.maximum(diff, 0.0)

    @staticmethod
    def decompose(stack: ProbStack) -> UncertaintyMaps:
        predictive = UncertaintyService.predictive_entropy(stack.mean)
        aleatoric = UncertaintyService.aleatoric_entropy(stack)
        return UncertaintyMaps(
            predictive=predictive,
            aleatoric=aleatoric,
            epistemic=UncertaintyService.epistemic_entropy(predictive, aleatoric),
            predicted=np.argmax(stack.mean, axis=-1),
        )

    @staticmethod
    def predict_maps(
        net: Network,
        features: np.ndarray,
        n_samples: int,
        rng: np.random.Generator,
        threads: int = 1,
    ) -> Tuple[ProbStack, UncertaintyMaps]:
        stack = UncertaintyService.mc_predict(net, features, n_samples, rng, threads)
        return stack, UncertaintyService.decompose(stack)

