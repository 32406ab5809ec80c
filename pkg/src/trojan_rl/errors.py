"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Array shapes do not agree with what an operation expects."""


class NumericError(FloatingPointError):
    """A NaN or Inf showed up where only finite values are allowed."""


class EnvStateError(RuntimeError):
    """An environment was driven from an invalid state (e.g. stepped after done)."""


class NumericAbort(RuntimeError):
    """Training hit a non-finite loss. Carries where the diagnostic snapshot went."""

    def __init__(self, message, snapshot_path=None, batch_index=None):
        super().__init__(message)
        self.snapshot_path = snapshot_path
        self.batch_index = batch_index
