"""
Pydantic schemas for configuration, dataset manifests and the HTTP surface.

These schemas:
- Validate configuration files and command-line overrides
- Serialize dataset manifests and checkpoint metadata
- Provide request/response contracts for the REST inference service

Pattern:
- *Config: configuration consumed by a service
- *Request / *Response: REST inference API bodies
"""

from typing import Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .models import CLASS_NAMES, FEATURE_NAMES, UncertaintyKind, Variant


# ============================================================================
# Grid and features
# ============================================================================

class GridSpec(BaseModel):
    """Grid of c_l x c_w cells centred on the ego vehicle; rows run along x"""
    c_l: int = Field(64, gt=0)
    c_w: int = Field(64, gt=0)
    cell_size: float = Field(0.5, gt=0)

    @field_validator("c_l", "c_w")
    @classmethod
    def _even(cls, v: int) -> int:
        if v % 2:
            raise ValueError("grid extents must be even so the ego sits on a cell corner")
        return v

    @property
    def shape(self) -> Tuple[int, int]:
        return self.c_l, self.c_w

    @property
    def length_m(self) -> float:
        return self.c_l * self.cell_size

    @property
    def width_m(self) -> float:
        return self.c_w * self.cell_size


class FeatureRange(BaseModel):
    """Dataset-level normalization range of one input feature"""
    min: float
    max: float

    @model_validator(mode="after")
    def _ordered(self):
        if self.min > self.max:
            raise ValueError("feature range min exceeds max")
        return self


# ============================================================================
# Network
# ============================================================================

class PriorConfig(BaseModel):
    """Isotropic zero-mean Gaussian prior N(0, gamma I)"""
    gamma: float = Field(1.0, gt=0)


class NetworkConfig(BaseModel):
    """Architecture of the ASPP grid-segmentation network"""
    variant: Variant = Variant.DETERMINISTIC
    c_l: int = Field(64, gt=0)
    c_w: int = Field(64, gt=0)
    f_in: int = Field(len(FEATURE_NAMES), gt=0)
    num_classes: int = Field(len(CLASS_NAMES), ge=2)
    aspp_layers: int = Field(4, ge=1)
    branch_channels: int = Field(16, ge=1)
    dilations: List[int] = Field(default_factory=lambda: [1, 2, 4], min_length=1)
    dropout_rate: float = Field(0.5, ge=0, lt=1)
    head_kernel: int = Field(3, ge=1)
    rho_init: float = -5.0
    prior: PriorConfig = Field(default_factory=PriorConfig)

    model_config = ConfigDict(frozen=True)

    @field_validator("dilations")
    @classmethod
    def _positive_dilations(cls, v: List[int]) -> List[int]:
        if any(d < 1 for d in v):
            raise ValueError("dilations must be >= 1")
        return v

    @field_validator("head_kernel")
    @classmethod
    def _odd_kernel(cls, v: int) -> int:
        if v % 2 == 0:
            raise ValueError("head kernel size must be odd to preserve the grid shape")
        return v


# ============================================================================
# Training
# ============================================================================

class TrainConfig(BaseModel):
    """Optimization protocol; defaults follow the published training setup"""
    variant: Variant = Variant.DETERMINISTIC
    epochs: int = Field(30, gt=0)
    batch_size: int = Field(4, gt=0)
    lr: float = Field(5e-4, gt=0)
    seed: int = 0
    kl_weighting: Literal["uniform"] = "uniform"
    train_samples: int = Field(1, ge=1)
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    adam_eps: float = Field(1e-8, gt=0)


class EpochRecord(BaseModel):
    """
    One line of training history.

    nll and kl are means over the steps of the epoch; kl is the unscaled
    KL total, so loss == kl / batches + nll.
    """
    epoch: int
    loss: float
    nll: float
    kl: float
    batches: int = Field(1, ge=1)


class OptimizerHyperparameters(BaseModel):
    lr: float
    beta1: float
    beta2: float
    eps: float
    step: int = Field(0, ge=0)


class CheckpointMeta(BaseModel):
    """JSON header of a checkpoint file"""
    network: NetworkConfig
    train: TrainConfig
    history: List[EpochRecord] = Field(default_factory=list)
    optimizer: Optional[OptimizerHyperparameters] = None
    feature_ranges: List[FeatureRange] = Field(default_factory=list)
    grid: Optional[GridSpec] = None


# ============================================================================
# Synthetic world
# ============================================================================

class RangeConfig(BaseModel):
    """Closed interval used for random counts and magnitudes"""
    min: float = 0.0
    max: float = 0.0

    @model_validator(mode="after")
    def _ordered(self):
        if self.min > self.max:
            raise ValueError("range min exceeds max")
        if self.min < 0:
            raise ValueError("range bounds must be >= 0")
        return self


class RcsModel(BaseModel):
    mean: float
    std: float = Field(..., ge=0)


class SensorMount(BaseModel):
    """Radar mounting position in the ego frame"""
    x: float
    y: float
    boresight_deg: float = 0.0
    fov_deg: float = Field(150.0, gt=0, le=360)


def _default_sensors() -> List[SensorMount]:
    return [
        SensorMount(x=2.0, y=0.8, boresight_deg=45.0),
        SensorMount(x=2.0, y=-0.8, boresight_deg=-45.0),
        SensorMount(x=-2.0, y=0.8, boresight_deg=135.0),
        SensorMount(x=-2.0, y=-0.8, boresight_deg=-135.0),
    ]


class RadarConfig(BaseModel):
    position_sigma: float = Field(0.15, ge=0)
    doppler_sigma: float = Field(0.3, ge=0)
    angular_resolution_deg: float = Field(2.0, gt=0)
    max_range: float = Field(25.0, gt=0)
    detection_prob: float = Field(0.7, ge=0, le=1)
    clutter_rate: float = Field(2.0, ge=0)
    rcs_static: RcsModel = Field(default_factory=lambda: RcsModel(mean=10.0, std=3.0))
    rcs_moving: RcsModel = Field(default_factory=lambda: RcsModel(mean=5.0, std=3.0))
    rcs_clutter: RcsModel = Field(default_factory=lambda: RcsModel(mean=-10.0, std=3.0))


class LidarConfig(BaseModel):
    angular_resolution_deg: float = Field(1.0, gt=0)
    max_range: float = Field(15.0, gt=0)
    ground_start: float = Field(2.5, ge=0)
    ground_step: float = Field(0.5, gt=0)
    layers: int = Field(3, ge=1)
    penetration: float = Field(0.3, ge=0)
    frames: int = Field(1, ge=1)


class OODConfig(BaseModel):
    """Bollard-like discs seen by radar but missing from the ground truth"""
    tag: str = "bollard"
    count: RangeConfig = Field(default_factory=lambda: RangeConfig(min=2, max=4))
    radius: float = Field(0.15, gt=0)
    rcs: RcsModel = Field(default_factory=lambda: RcsModel(mean=22.0, std=2.0))


class ScenarioConfig(BaseModel):
    """
    Knobs of the synthetic scene generator.

    `training=True` suppresses OOD injection regardless of `ood`.
    """
    seed: int = 42
    grid: GridSpec = Field(default_factory=GridSpec)
    frames: int = Field(5, ge=1)
    frame_interval: float = Field(0.1, gt=0)
    ego_speed: RangeConfig = Field(default_factory=lambda: RangeConfig(min=0.0, max=10.0))
    yaw_rate: float = Field(0.2, ge=0)
    walls: RangeConfig = Field(default_factory=lambda: RangeConfig(min=1, max=3))
    wall_length: RangeConfig = Field(default_factory=lambda: RangeConfig(min=4.0, max=15.0))
    wall_thickness: float = Field(0.3, gt=0)
    boxes: RangeConfig = Field(default_factory=lambda: RangeConfig(min=2, max=5))
    box_size: RangeConfig = Field(default_factory=lambda: RangeConfig(min=0.8, max=3.0))
    moving: RangeConfig = Field(default_factory=lambda: RangeConfig(min=2, max=4))
    moving_speed: RangeConfig = Field(default_factory=lambda: RangeConfig(min=2.0, max=12.0))
    pedestrians: RangeConfig = Field(default_factory=lambda: RangeConfig(min=0, max=2))
    pedestrian_speed: RangeConfig = Field(default_factory=lambda: RangeConfig(min=0.8, max=2.0))
    keep_out: float = Field(4.0, ge=0)
    radar: RadarConfig = Field(default_factory=RadarConfig)
    lidar: LidarConfig = Field(default_factory=LidarConfig)
    sensors: List[SensorMount] = Field(default_factory=_default_sensors, min_length=1)
    ood: Optional[OODConfig] = Field(default_factory=OODConfig)
    training: bool = True

    @model_validator(mode="after")
    def _moving_speed_positive(self):
        if self.moving.max > 0 and self.moving_speed.min <= 0.5:
            raise ValueError("moving objects need a speed above 0.5 m/s")
        if self.pedestrians.max > 0 and self.pedestrian_speed.min <= 0.5:
            raise ValueError("pedestrians need a speed above 0.5 m/s")
        return self


# ============================================================================
# Dataset
# ============================================================================

class DatasetManifest(BaseModel):
    """Contents of manifest.json in a dataset directory"""
    format_version: int = 1
    grid: GridSpec
    feature_names: List[str] = Field(default_factory=lambda: list(FEATURE_NAMES))
    feature_ranges: List[FeatureRange]
    class_names: List[str] = Field(default_factory=lambda: list(CLASS_NAMES))
    frame_count: int = Field(5, ge=1)
    sensors: List[SensorMount] = Field(default_factory=_default_sensors)
    splits: Dict[str, List[str]] = Field(default_factory=dict)
    scenario: Optional[ScenarioConfig] = None

    @model_validator(mode="after")
    def _ranges_match_features(self):
        if len(self.feature_ranges) != len(self.feature_names):
            raise ValueError("one feature range per feature is required")
        return self


class DetectionColumns(BaseModel):
    x: List[float]
    y: List[float]
    doppler: List[float]
    rcs: List[float]
    t_rel: List[float]
    sensor: List[int]


class LidarColumns(BaseModel):
    x: List[float]
    y: List[float]
    cls: List[int]


class PoseRecord(BaseModel):
    x: float
    y: float
    yaw: float
    timestamp: float


class OODRecord(BaseModel):
    x: float
    y: float
    radius: float
    tag: str


class SceneRecord(BaseModel):
    """
    One scene file of a dataset directory.

    labels and weights are the flattened grids, row-major, row 0 = rear-most.
    """
    name: str
    detections: DetectionColumns
    lidar: LidarColumns
    poses: List[PoseRecord]
    labels: List[int]
    weights: List[float]
    sensors: List[Tuple[float, float]] = Field(default_factory=list)
    ood_objects: List[OODRecord] = Field(default_factory=list)


# ============================================================================
# Evaluation
# ============================================================================

class ClassIoU(BaseModel):
    name: str
    iou: float
    absent: bool = False
    true_positives: int
    false_positives: int
    false_negatives: int


class CurveRecord(BaseModel):
    """
    Precision of one class at ten uncertainty quantiles.

    Ordered by uncertainty ascending (most certain first); precision at
    quantile q covers predictions with uncertainty <= threshold(q).
    """
    kind: UncertaintyKind
    class_name: str
    empty: bool = False
    quantiles: List[float]
    thresholds: List[Optional[float]]
    precision: List[Optional[float]]
    support: List[int]
    spearman: float = 0.0


class OODReport(BaseModel):
    """Mean entropies near OOD objects relative to visible free cells"""
    near_cells: int
    free_cells: int
    epistemic_ratio: float
    aleatoric_ratio: float


class EvaluationSummary(BaseModel):
    variant: Variant
    split: str
    scenes: int
    mc_samples: int
    visible_cells: int
    miou: float
    classes: List[ClassIoU]
    curves: List[CurveRecord]
    ood: Optional[OODReport] = None


# ============================================================================
# Command line
# ============================================================================

class RunConfig(BaseModel):
    """
    Fully resolved command-line invocation.

    `config` is a ScenarioConfig file for gen. An unset seed means the
    scenario seed for gen and 0 everywhere else.
    """
    subcommand: Literal["gen", "train", "predict", "eval", "prune", "info", "serve"]
    config: Optional[str] = None
    data: Optional[str] = None
    checkpoint: Optional[str] = None
    scene: Optional[str] = None
    split: str = "test"
    variant: Variant = Variant.DETERMINISTIC
    seed: Optional[int] = None
    mc_samples: int = Field(30, ge=1)
    epochs: int = Field(30, gt=0)
    lr: float = Field(5e-4, gt=0)
    batch_size: int = Field(4, gt=0)
    prior_gamma: float = Field(1.0, gt=0)
    repeat: int = Field(1, ge=1)
    n_train: int = Field(512, gt=0)
    n_test: int = Field(128, gt=0)
    prune_fraction: float = Field(0.0, ge=0, lt=1)
    out: Optional[str] = None
    threads: int = Field(1, ge=1)
    scale: int = Field(1, ge=1)
    host: str = "127.0.0.1"
    port: int = Field(8000, gt=0)

    @model_validator(mode="after")
    def _required_flags(self):
        required = {
            "gen": ["out"],
            "train": ["data", "out"],
            "predict": ["checkpoint", "scene", "out"],
            "eval": ["checkpoint", "data", "out"],
            "prune": ["checkpoint", "out"],
            "info": ["checkpoint"],
            "serve": ["checkpoint"],
        }[self.subcommand]
        missing = [name for name in required if getattr(self, name) is None]
        if missing:
            raise ValueError(f"{self.subcommand} requires: {', '.join('--' + m for m in missing)}")
        return self


# ============================================================================
# REST inference API
# ============================================================================

class RadarDetection(BaseModel):
    """One radar detection in the reference ego frame"""
    x: float = Field(..., allow_inf_nan=False)
    y: float = Field(..., allow_inf_nan=False)
    doppler: float = Field(0.0, allow_inf_nan=False)
    rcs: float = Field(0.0, allow_inf_nan=False)
    t_rel: float = Field(0.0, ge=0, allow_inf_nan=False)
    sensor: int = Field(0, ge=0)


class PredictRequest(BaseModel):
    """Detections to grid and classify"""
    detections: List[RadarDetection] = Field(default_factory=list)
    mc_samples: int = Field(30, ge=1, le=1024)
    seed: int = 0


class PredictResponse(BaseModel):
    """Per-cell prediction and entropy grids (row 0 = rear-most)"""
    variant: Variant
    c_l: int
    c_w: int
    mc_samples: int
    predicted_class: List[List[int]]
    predictive_entropy: List[List[float]]
    aleatoric_entropy: List[List[float]]
    epistemic_entropy: List[List[float]]
    mean_predictive_entropy: float
    mean_epistemic_entropy: float


class ModelResponse(BaseModel):
    """Loaded checkpoint summary"""
    variant: Variant
    network: NetworkConfig
    parameter_count: int
    conv_parameter_count: int
    epochs_trained: int
