"""
Checkpoint service - binary persistence of trained networks.

File layout (little-endian):
    magic "BNGR" | version u32 | header length u32 | header JSON (CheckpointMeta)
    tensor count u32 | per tensor:
        name length u16 | UTF-8 name | dtype code u8 | rank u8 | dims u64 x rank | f32 payload

Tensor names:
- param/<name>, buffer/<name>: network state
- adam.m/<name>, adam.v/<name>: optimizer moments (optional)
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
from pydantic import ValidationError

from ..errors import CheckpointShapeError, CheckpointVersionError, CorruptCheckpointError, ShapeError
from ..network import Network, build_network
from ..schemas import (
    CheckpointMeta,
    EpochRecord,
    FeatureRange,
    GridSpec,
    NetworkConfig,
    OptimizerHyperparameters,
    TrainConfig,
)
from ..tensor import AdamState

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"BNGR"
CHECKPOINT_VERSION = 1
DTYPE_F32 = 1


@dataclass
class Checkpoint:
    """Trained network with its configuration, history and optimizer state"""
    network: Network
    train: TrainConfig
    history: List[EpochRecord] = field(default_factory=list)
    optimizer: Optional[AdamState] = None
    feature_ranges: List[FeatureRange] = field(default_factory=list)
    grid: Optional[GridSpec] = None

    @property
    def network_config(self) -> NetworkConfig:
        return self.network.cfg

    def grid_spec(self) -> GridSpec:
        """Training grid; checkpoints without one assume the default cell size"""
        return self.grid or GridSpec(c_l=self.network.cfg.c_l, c_w=self.network.cfg.c_w)

    def meta(self) -> CheckpointMeta:
        optimizer = None
        if self.optimizer is not None:
            optimizer = OptimizerHyperparameters(**self.optimizer.hyperparameters())
        return CheckpointMeta(
            network=self.network.cfg,
            train=self.train,
            history=self.history,
            optimizer=optimizer,
            feature_ranges=self.feature_ranges,
            grid=self.grid,
        )


class _Reader:
    """Bounds-checked cursor over checkpoint bytes"""

    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, size: int) -> bytes:
        if self.offset + size > len(self.data):
            raise CorruptCheckpointError(f"truncated at byte {self.offset} (needed {size} more)")
        chunk = self.data[self.offset: self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt: str) -> Tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


class CheckpointService:
    """Service for checkpoint encoding and decoding"""

    @staticmethod
    def _tensors(ckpt: Checkpoint) -> Dict[str, np.ndarray]:
        tensors = {f"param/{name}": p.data for name, p in ckpt.network.parameters().items()}
        tensors.update({f"buffer/{name}": buf for name, buf in ckpt.network.buffers().items()})
        if ckpt.optimizer is not None:
            for name in ckpt.optimizer.m:
                tensors[f"adam.m/{name}"] = ckpt.optimizer.m[name]
                tensors[f"adam.v/{name}"] = ckpt.optimizer.v[name]
        return tensors

    @staticmethod
    def encode(ckpt: Checkpoint) -> bytes:
        header = ckpt.meta().model_dump_json().encode("utf-8")
        tensors = CheckpointService._tensors(ckpt)
        parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(header)), header]
        parts.append(struct.pack("<I", len(tensors)))
        for name, array in tensors.items():
            encoded = name.encode("utf-8")
            array = np.asarray(array)
            parts.append(struct.pack("<H", len(encoded)))
            parts.append(encoded)
            parts.append(struct.pack("<BB", DTYPE_F32, array.ndim))
            parts.append(struct.pack(f"<{array.ndim}Q", *array.shape))
            parts.append(np.ascontiguousarray(array, dtype="<f4").tobytes())
        return b"".join(parts)

    @staticmethod
    def decode(data: bytes) -> Checkpoint:
        reader = _Reader(data)
        if reader.take(4) != CHECKPOINT_MAGIC:
            raise CorruptCheckpointError("bad magic bytes")
        (version,) = reader.unpack("<I")
        if version != CHECKPOINT_VERSION:
            raise CheckpointVersionError(
                f"checkpoint format version {version} is not supported (expected {CHECKPOINT_VERSION})"
            )
        (header_len,) = reader.unpack("<I")
        try:
            meta = CheckpointMeta.model_validate_json(reader.take(header_len))
        except ValidationError as exc:
            raise CorruptCheckpointError(f"unreadable header ({exc.error_count()} errors)") from exc

        tensors: Dict[str, np.ndarray] = {}
        (count,) = reader.unpack("<I")
        for _ in range(count):
            (name_len,) = reader.unpack("<H")
            try:
                name = reader.take(name_len).decode("utf-8")
            except UnicodeDecodeError as exc:
                raise CorruptCheckpointError("tensor name is not UTF-8") from exc
            dtype_code, rank = reader.unpack("<BB")
            if dtype_code != DTYPE_F32:
                raise CorruptCheckpointError(f"unknown dtype code {dtype_code} for {name}")
            dims = reader.unpack(f"<{rank}Q")
            remaining = len(data) - reader.offset
            if any(d > remaining for d in dims):
                raise CorruptCheckpointError(f"dimensions {dims} of {name} exceed the file size")
            size = math.prod(dims)
            if 4 * size > remaining:
                raise CorruptCheckpointError(f"{name} needs {4 * size} bytes, {remaining} left")
            payload = reader.take(4 * size)
            tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
        if reader.offset != len(data):
            raise CorruptCheckpointError(f"{len(data) - reader.offset} trailing bytes")
        return CheckpointService._assemble(meta, tensors)

    @staticmethod
    def _assemble(meta: CheckpointMeta, tensors: Dict[str, np.ndarray]) -> Checkpoint:
        """Rebuild the network and check every stored tensor against its config"""
        network = build_network(meta.network)
        state = {name[len("param/"):]: t for name, t in tensors.items() if name.startswith("param/")}
        state.update({name[len("buffer/"):]: t for name, t in tensors.items() if name.startswith("buffer/")})
        expected = set(network.state_dict())
        unexpected = sorted(set(state) - expected)
        if unexpected:
            raise CheckpointShapeError(f"tensors not in a {meta.network.variant.value} network: {', '.join(unexpected)}")
        try:
            network.load_state_dict(state)
        except ShapeError as exc:
            raise CheckpointShapeError(str(exc)) from exc

        optimizer = None
        if meta.optimizer is not None:
            params = network.parameters()
            optimizer = AdamState(
                lr=meta.optimizer.lr,
                beta1=meta.optimizer.beta1,
                beta2=meta.optimizer.beta2,
                eps=meta.optimizer.eps,
                step=meta.optimizer.step,
            )
            for name, t in tensors.items():
                kind, _, param = name.partition("/")
                if kind not in ("adam.m", "adam.v"):
                    continue
                if param not in params or t.shape != params[param].shape:
                    raise CheckpointShapeError(f"optimizer moment {name} does not match its parameter")
                (optimizer.m if kind == "adam.m" else optimizer.v)[param] = t
        return Checkpoint(
            network=network,
            train=meta.train,
            history=list(meta.history),
            optimizer=optimizer,
            feature_ranges=list(meta.feature_ranges),
            grid=meta.grid,
        )

    @staticmethod
    def save_checkpoint(ckpt: Checkpoint, path: Path | str) -> Path:
        path = Path(path)
        path.write_bytes(CheckpointService.encode(ckpt))
        logger.info("saved %s checkpoint to %s", ckpt.network.variant.value, path)
        return path

    @staticmethod
    def load_checkpoint(path: Path | str) -> Checkpoint:
        path = Path(path)
        ckpt = CheckpointService.decode(path.read_bytes())
        logger.debug("loaded %s checkpoint from %s", ckpt.network.variant.value, path)
        return ckpt
