"""
ASPP grid-segmentation network in four variants.

Layer order:
    batch norm -> N x ASPP block -> [II] -> head conv -> softmax

Each ASPP block runs one 3x3 convolution per dilation rate in parallel,
concatenates the branch outputs along channels and applies ReLU. The grid
size never changes. Point II is the output of the last block.

Variants:
- deterministic: point weights everywhere
- probabilistic: every convolution variational
- hybrid: only the head convolution variational
- mc-dropout: point weights plus a dropout mask at II, active at test time

Batch normalization always uses point parameters.
"""

from __future__ import annotations

import logging
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from .errors import ConfigurationError, NotVariationalError, ShapeError
from .layers import PointConv, VariationalConv, mc_dropout_mask
from .models import ForwardMode, Variant
from .schemas import NetworkConfig
from .tensor import RunningStats, Tensor, batch_norm, concat_channels, relu, softmax_cells

logger = logging.getLogger(__name__)

Conv = Union[PointConv, VariationalConv]

PRUNED_RHO = -20.0


class ASPPBlock:
    """Parallel dilated convolutions, concatenated cell-wise"""

    def __init__(self, branches: List[Conv]):
        self.branches = branches

    def __call__(self, x: Tensor, mode: ForwardMode, rng, cache: bool) -> Tuple[Tensor, List[Tensor]]:
        outputs, kls = [], []
        for conv in self.branches:
            out, kl = conv(x, mode, rng, cache)
            outputs.append(out)
            if kl is not None:
                kls.append(kl)
        return relu(concat_channels(outputs)), kls


class Network:
    """
    Built network with named parameters.

    Parameter names: bn.scale, bn.shift, aspp<i>.d<rate>.<param>, head.<param>;
    variational convolutions expose weight_mu/weight_rho/bias_mu/bias_rho.
    """

    def __init__(self, cfg: NetworkConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.bn_scale = Tensor(np.ones(cfg.f_in), requires_grad=True, name="bn.scale")
        self.bn_shift = Tensor(np.zeros(cfg.f_in), requires_grad=True, name="bn.shift")
        self.running = RunningStats.create(cfg.f_in)

        variational_body = cfg.variant == Variant.PROBABILISTIC
        variational_head = cfg.variant in (Variant.PROBABILISTIC, Variant.HYBRID)

        self.blocks: List[ASPPBlock] = []
        cin = cfg.f_in
        for i in range(cfg.aspp_layers):
            branches = [
                self._make_conv(f"aspp{i}.d{d}", cin, cfg.branch_channels, 3, d, rng, variational_body)
                for d in cfg.dilations
            ]
            self.blocks.append(ASPPBlock(branches))
            cin = cfg.branch_channels * len(cfg.dilations)
        self.head = self._make_conv("head", cin, cfg.num_classes, cfg.head_kernel, 1, rng, variational_head)
        self.dropout_rate = cfg.dropout_rate if cfg.variant == Variant.MC_DROPOUT else None

    def _make_conv(self, name, cin, cout, kernel, dilation, rng, variational: bool) -> Conv:
        if variational:
            return VariationalConv(name, cin, cout, kernel, dilation, rng, self.cfg.prior, self.cfg.rho_init)
        return PointConv(name, cin, cout, kernel, dilation, rng)

    # ------------------------------------------------------------------
    # Introspection
    # ------------------------------------------------------------------

    @property
    def variant(self) -> Variant:
        return self.cfg.variant

    def conv_layers(self) -> List[Conv]:
        return [conv for block in self.blocks for conv in block.branches] + [self.head]

    def variational_layers(self) -> List[VariationalConv]:
        return [conv for conv in self.conv_layers() if conv.variational]

    @property
    def is_stochastic(self) -> bool:
        return bool(self.variational_layers()) or self.dropout_rate is not None

    def layer(self, name: str) -> Conv:
        for conv in self.conv_layers():
            if conv.name == name:
                return conv
        names = ", ".join(conv.name for conv in self.conv_layers())
        raise ConfigurationError(f"no layer named {name!r}; layers: {names}")

    def parameters(self) -> Dict[str, Tensor]:
        params = {self.bn_scale.name: self.bn_scale, self.bn_shift.name: self.bn_shift}
        for conv in self.conv_layers():
            params.update(conv.parameters())
        return params

    def buffers(self) -> Dict[str, np.ndarray]:
        return {"bn.running_mean": self.running.mean, "bn.running_var": self.running.var}

    def parameter_count(self) -> int:
        return sum(int(p.data.size) for p in self.parameters().values())

    def conv_parameter_count(self) -> int:
        return sum(conv.conv_parameter_count() for conv in self.conv_layers())

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.parameters().items()}
        state.update(self.buffers())
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        targets = {name: p.data for name, p in self.parameters().items()}
        targets.update(self.buffers())
        missing = sorted(set(targets) - set(state))
        if missing:
            raise ShapeError(f"state is missing tensors: {', '.join(missing)}")
        for name, target in targets.items():
            source = np.asarray(state[name])
            if source.shape != target.shape:
                raise ShapeError(f"tensor {name} has the wrong shape", [target.shape, source.shape])
            target[...] = source

    # ------------------------------------------------------------------
    # Forward
    # ------------------------------------------------------------------

    def forward(
        self,
        x: Union[Tensor, np.ndarray],
        mode: ForwardMode = ForwardMode.MEAN,
        rng: Optional[np.random.Generator] = None,
        training: bool = False,
        cache: bool = True,
    ) -> Tuple[Tensor, Tensor]:
        """
        Class probabilities (B x C x c_l x c_w) and the total KL to the prior.

        `sample` draws one weight realization per variational layer and one
        dropout mask; `mean-weights` uses posterior means and no dropout.
        """
        x = x if isinstance(x, Tensor) else Tensor(x)
        cfg = self.cfg
        expected = (cfg.f_in, cfg.c_l, cfg.c_w)
        if x.data.ndim != 4 or tuple(x.shape[1:]) != expected:
            raise ShapeError(f"network expects B x {cfg.f_in} x {cfg.c_l} x {cfg.c_w} input", [x.shape])
        mode = ForwardMode(mode)
        if mode == ForwardMode.SAMPLE and self.is_stochastic and rng is None:
            raise ConfigurationError("sampled forward passes need an rng stream")

        h = batch_norm(x, self.bn_scale, self.bn_shift, self.running, training)
        kls: List[Tensor] = []
        for block in self.blocks:
            h, block_kls = block(h, mode, rng, cache)
            kls.extend(block_kls)
        if self.dropout_rate is not None and mode == ForwardMode.SAMPLE:
            h = h * Tensor(mc_dropout_mask(h.shape, self.dropout_rate, rng))
        logits, head_kl = self.head(h, mode, rng, cache)
        if head_kl is not None:
            kls.append(head_kl)

        total_kl = Tensor(0.0)
        for kl in kls:
            total_kl = total_kl + kl
        return softmax_cells(logits), total_kl

    __call__ = forward

    # ------------------------------------------------------------------
    # Weight reliability
    # ------------------------------------------------------------------

    def prune_low_snr(self, fraction: float) -> int:
        """
        Collapse the `fraction` of variational entries with the lowest |mu|/sigma.

        Pruned entries get mu = 0 and rho = -20, i.e. a weight fixed at zero.
        Returns the number of pruned entries.
        """
        if not 0 <= fraction < 1:
            raise ConfigurationError(f"prune fraction must lie in [0, 1), got {fraction}")
        posteriors = [vp for conv in self.variational_layers() for vp in (conv.weight, conv.bias)]
        if not posteriors:
            raise NotVariationalError(f"{self.variant.value} network has no variational weights to prune")
        snr = np.concatenate([np.abs(vp.mu.data).ravel() / vp.sigma.ravel() for vp in posteriors])
        count = int(fraction * snr.size)
        if count == 0:
            return 0
        pruned = np.zeros(snr.size, dtype=bool)
        pruned[np.argsort(snr, kind="stable")[:count]] = True
        offset = 0
        for vp in posteriors:
            mask = pruned[offset: offset + vp.size].reshape(vp.shape)
            vp.mu.data[mask] = 0.0
            vp.rho.data[mask] = PRUNED_RHO
            offset += vp.size
        logger.info("pruned %d of %d variational weights", count, snr.size)
        return count


def build_network(cfg: NetworkConfig, rng: Optional[np.random.Generator] = None) -> Network:
    """Construct and initialize a network; identical rng seeds give identical weights"""
    if not isinstance(cfg, NetworkConfig):
        raise ConfigurationError(f"expected NetworkConfig, got {type(cfg).__name__}")
    return Network(cfg, rng if rng is not None else np.random.default_rng(0))


def forward(
    net: Network,
    x: Union[Tensor, np.ndarray],
    mode: ForwardMode = ForwardMode.MEAN,
    rng: Optional[np.random.Generator] = None,
    training: bool = False,
) -> Tuple[Tensor, Tensor]:
    return net.forward(x, mode, rng, training)
