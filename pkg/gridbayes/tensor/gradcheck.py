"""
Central finite-difference gradient checks.

Run inside `float64_mode()`; the functions here do not switch precision
themselves so callers control how their tensors are built.
"""

from __future__ import annotations

from typing import Callable, List, Sequence

import numpy as np

from .core import Tensor, backward


def numerical_gradient(
    loss_fn: Callable[[], Tensor],
    leaf: Tensor,
    index: tuple,
    h: float = 1e-4,
) -> float:
    """d loss / d leaf[index] by central differences; leaf.data is restored"""
    original = leaf.data[index]
    leaf.data[index] = original + h
    plus = loss_fn().item()
    leaf.data[index] = original - h
    minus = loss_fn().item()
    leaf.data[index] = original
    return (plus - minus) / (2 * h)


def relative_error(analytic: float, numeric: float, floor: float = 1e-8) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def check_gradients(
    loss_fn: Callable[[], Tensor],
    leaves: Sequence[Tensor],
    rng: np.random.Generator,
    probes: int = 10,
    h: float = 1e-4,
    atol: float = 1e-7,
) -> float:
    """
    Compare analytic and numerical gradients at random coordinates.

    Returns the worst relative error over `probes` coordinates per leaf.
    Coordinates where both gradients are below `atol` count as exact.
    """
    loss = loss_fn()
    analytic = backward(loss, wrt=list(leaves))
    worst = 0.0
    for leaf, grad in zip(leaves, analytic):
        flat_indices: List[int] = list(rng.choice(leaf.data.size, size=min(probes, leaf.data.size), replace=False))
        for flat in flat_indices:
            index = np.unravel_index(flat, leaf.shape)
            numeric = numerical_gradient(loss_fn, leaf, index, h)
            if abs(grad[index]) < atol and abs(numeric) < atol:
                continue
            worst = max(worst, relative_error(float(grad[index]), numeric))
    return worst
