"""
Service layer - the pipeline shared by the CLI and the REST service.

Services encapsulate:
- Scene gridding, labeling and observability
- Synthetic scene generation and dataset IO
- Training, checkpoints and MC prediction
- Evaluation metrics and rendering

Both the command line and the inference API call these same services.
"""

from .scene_service import SceneService
from .dataset_service import DatasetService, SceneDataset
from .world_service import WorldService
from .checkpoint_service import Checkpoint, CheckpointService
from .training_service import TrainingService, elbo_loss
from .uncertainty_service import ProbStack, UncertaintyMaps, UncertaintyService
from .metrics_service import EvaluationReport, MetricsService
from .render_service import RenderService

__all__ = [
    "SceneService",
    "DatasetService",
    "SceneDataset",
    "WorldService",
    "Checkpoint",
    "CheckpointService",
    "TrainingService",
    "elbo_loss",
    "ProbStack",
    "UncertaintyMaps",
    "UncertaintyService",
    "EvaluationReport",
    "MetricsService",
    "RenderService",
]
