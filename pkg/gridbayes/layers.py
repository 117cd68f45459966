"""
Point-weight and variational convolution layers, MC-dropout masks.

Variational weights follow the mean-field Gaussian posterior
q(w | mu, sigma) with sigma = softplus(rho). Samples use the
reparameterization w = mu + sigma * eps so gradients reach mu and rho;
the KL term to the N(0, gamma I) prior is closed form.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from .errors import ConfigurationError
from .models import ForwardMode
from .schemas import PriorConfig
from .tensor import Tensor, conv2d_dilated, gaussian_kl, reparameterize, softplus


@dataclass
class VariationalParams:
    """
    Gaussian posterior over one weight tensor.

    epsilon holds the noise of the last cached sample; mu, rho and epsilon
    always share a shape.
    """
    mu: Tensor
    rho: Tensor
    epsilon: Optional[np.ndarray] = None

    @property
    def sigma(self) -> np.ndarray:
        return softplus(self.rho.data)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.mu.shape

    @property
    def size(self) -> int:
        return int(self.mu.data.size)


def sample_weights(
    vp: VariationalParams,
    rng: Optional[np.random.Generator],
    epsilon: Optional[np.ndarray] = None,
    cache: bool = True,
) -> Tensor:
    """
    Draw w = mu + softplus(rho) * eps with eps ~ N(0, 1) from `rng`.

    An explicit `epsilon` replaces the draw. With cache=True the noise is
    kept on `vp.epsilon`; concurrent inference passes use cache=False.
    """
    if epsilon is None:
        if rng is None:
            raise ConfigurationError("sampling weights needs an rng stream")
        epsilon = rng.standard_normal(vp.shape)
    epsilon = np.asarray(epsilon, dtype=vp.mu.data.dtype)
    if cache:
        vp.epsilon = epsilon
    return reparameterize(vp.mu, vp.rho, epsilon)


def kl_to_prior(vp: VariationalParams, prior: PriorConfig) -> Tensor:
    """sum of ln(sqrt(gamma)/sigma) + (sigma^2 + mu^2)/(2 gamma) - 1/2 over all weights"""
    return gaussian_kl(vp.mu, vp.rho, prior.gamma)


def mc_dropout_mask(shape: Tuple[int, ...], rate: float, rng: np.random.Generator) -> np.ndarray:
    """
    Inverted-dropout mask: 0 with probability `rate`, else 1 / (1 - rate).

    The mask is drawn at training and at inference time alike.
    """
    if not 0 <= rate < 1:
        raise ConfigurationError(f"dropout rate must lie in [0, 1), got {rate}")
    if rate == 0:
        return np.ones(shape)
    keep = rng.random(shape) >= rate
    return keep / (1.0 - rate)


def glorot_bound(cin: int, cout: int, kernel: int) -> float:
    fan_in = cin * kernel * kernel
    fan_out = cout * kernel * kernel
    return math.sqrt(6.0 / (fan_in + fan_out))


# ============================================================================
# Convolution layers
# ============================================================================

class PointConv:
    """Convolution with one value per weight"""

    variational = False

    def __init__(self, name: str, cin: int, cout: int, kernel: int, dilation: int, rng: np.random.Generator):
        bound = glorot_bound(cin, cout, kernel)
        self.name = name
        self.dilation = dilation
        self.weight = Tensor(rng.uniform(-bound, bound, (cout, cin, kernel, kernel)),
                             requires_grad=True, name=f"{name}.weight")
        self.bias = Tensor(np.zeros(cout), requires_grad=True, name=f"{name}.bias")

    def parameters(self) -> Dict[str, Tensor]:
        return {self.weight.name: self.weight, self.bias.name: self.bias}

    def conv_parameter_count(self) -> int:
        return int(self.weight.data.size + self.bias.data.size)

    def __call__(self, x: Tensor, mode: ForwardMode, rng, cache: bool = True) -> Tuple[Tensor, Optional[Tensor]]:
        return conv2d_dilated(x, self.weight, self.bias, self.dilation), None


class VariationalConv:
    """Convolution whose weights and biases are Gaussian posteriors"""

    variational = True

    def __init__(
        self,
        name: str,
        cin: int,
        cout: int,
        kernel: int,
        dilation: int,
        rng: np.random.Generator,
        prior: PriorConfig,
        rho_init: float = -5.0,
    ):
        bound = glorot_bound(cin, cout, kernel)
        self.name = name
        self.dilation = dilation
        self.prior = prior
        shape = (cout, cin, kernel, kernel)
        self.weight = VariationalParams(
            mu=Tensor(rng.uniform(-bound, bound, shape), requires_grad=True, name=f"{name}.weight_mu"),
            rho=Tensor(np.full(shape, rho_init), requires_grad=True, name=f"{name}.weight_rho"),
        )
        self.bias = VariationalParams(
            mu=Tensor(np.zeros(cout), requires_grad=True, name=f"{name}.bias_mu"),
            rho=Tensor(np.full(cout, rho_init), requires_grad=True, name=f"{name}.bias_rho"),
        )

    def parameters(self) -> Dict[str, Tensor]:
        return {
            t.name: t
            for t in (self.weight.mu, self.weight.rho, self.bias.mu, self.bias.rho)
        }

    def conv_parameter_count(self) -> int:
        return 2 * (self.weight.size + self.bias.size)

    def kl(self) -> Tensor:
        return kl_to_prior(self.weight, self.prior) + kl_to_prior(self.bias, self.prior)

    def __call__(self, x: Tensor, mode: ForwardMode, rng, cache: bool = True) -> Tuple[Tensor, Optional[Tensor]]:
        if mode == ForwardMode.SAMPLE:
            weight = sample_weights(self.weight, rng, cache=cache)
            bias = sample_weights(self.bias, rng, cache=cache)
        else:
            weight, bias = self.weight.mu, self.bias.mu
        return conv2d_dilated(x, weight, bias, self.dilation), self.kl()
