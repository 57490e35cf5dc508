"""Exception types shared across the package."""


class TrainingDivergedError(RuntimeError):
    """A training loss became non-finite."""


class NonFiniteGradientError(RuntimeError):
    """An input gradient contained NaN or inf values.

    ``batch_indices`` lists the offending examples.
    """

    def __init__(self, batch_indices):
        self.batch_indices = list(batch_indices)
        super().__init__(f"non-finite input gradient for batch indices {self.batch_indices}")


class CheckpointError(Exception):
    """Base class for container read/write problems."""


class CorruptCheckpointError(CheckpointError):
    """File is truncated, has a bad magic number, or fails its digest check."""


class CheckpointVersionError(CheckpointError):
    """File was written by an incompatible format version."""


class CheckpointMismatchError(CheckpointError):
    """File is well-formed but its shapes or metadata do not match what was expected."""
