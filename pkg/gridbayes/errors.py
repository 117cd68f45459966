"""
Exception hierarchy.

Services raise these; the CLI turns them into exit code 1 and the REST layer
turns them into HTTP errors. Nothing below the service layer knows about
either surface.
"""

from typing import Sequence


class GridBayesError(Exception):
    """Base class for every error raised by gridbayes"""


class ConfigurationError(GridBayesError):
    """Invalid configuration, dimensions or arguments"""


class ShapeError(ConfigurationError):
    """Tensor shapes that do not fit together"""

    def __init__(self, message: str, dims: Sequence[Sequence[int]] = ()):
        self.dims = [tuple(int(d) for d in shape) for shape in dims]
        if self.dims:
            message = f"{message} (dims: {', '.join(str(d) for d in self.dims)})"
        super().__init__(message)


class NonFiniteError(GridBayesError):
    """NaN or infinity where finite values are required"""

    def __init__(self, message: str, name: str | None = None):
        self.name = name
        super().__init__(f"{message}: {name}" if name else message)


class NotScalarError(GridBayesError):
    """backward() called on a tensor that is not a scalar"""


class NoObservableCellsError(GridBayesError):
    """Every cell weight is zero, so the loss is undefined"""

    def __init__(self, message: str = "no observable cells"):
        super().__init__(message)


class UncertaintyInconsistencyError(GridBayesError):
    """Aleatoric entropy exceeded predictive entropy beyond tolerance"""


class TrainingDivergedError(GridBayesError):
    """A loss term became non-finite during training"""

    def __init__(self, epoch: int, batch: int, term: str, value: float | None = None):
        self.epoch = epoch
        self.batch = batch
        self.term = term
        self.value = value
        super().__init__(
            f"non-finite {term} at epoch {epoch}, batch {batch}"
            + (f" (value={value})" if value is not None else "")
        )


class NotVariationalError(GridBayesError):
    """Operation requires a variational layer but got a deterministic one"""


class CheckpointError(GridBayesError):
    """Base class for checkpoint codec errors"""


class CorruptCheckpointError(CheckpointError):
    """Truncated or malformed checkpoint file"""

    def __init__(self, detail: str):
        super().__init__(f"corrupt checkpoint: {detail}")


class CheckpointVersionError(CheckpointError):
    """Checkpoint written by an unsupported format version"""


class CheckpointShapeError(CheckpointError):
    """Stored tensors do not match the embedded network configuration"""
