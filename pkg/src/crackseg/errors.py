"""Exception types shared across the package.

The CLI maps these onto its exit codes: ConfigError -> 2,
DataError / ShapeError / CheckpointError -> 3, NumericalError -> 4.
"""


class ConfigError(ValueError):
    """Invalid hyperparameters or configuration keys."""


class ShapeError(ValueError):
    """Tensor shapes violate an operation's contract."""


class DataError(ValueError):
    """Unreadable, missing or malformed input data."""


class CheckpointError(DataError):
    """Checkpoint file is corrupt, truncated or of the wrong family/version."""


class NumericalError(ArithmeticError):
    """Non-finite loss encountered during training."""

    def __init__(self, epoch: int, batch: int, loss: float):
        self.epoch = epoch
        self.batch = batch
        self.loss = loss
        super().__init__(f"non-finite loss {loss!r} at epoch {epoch}, batch {batch}")
