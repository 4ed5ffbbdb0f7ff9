"""Exception hierarchy shared by every module of the package."""


class RGBTError(Exception):
    """Base class for all package errors."""


class ConfigError(RGBTError, ValueError):
    """Invalid shapes, hyperparameters or configuration values."""


class NumericError(RGBTError, FloatingPointError):
    """A forward kernel produced NaN or Inf."""


class GraphError(RGBTError, RuntimeError):
    """Misuse of the autograd tape (e.g. backward on a detached value)."""


class FusionError(ConfigError):
    """RGB and thermal feature maps cannot be fused (shape mismatch)."""


class DataError(RGBTError, ValueError):
    """Bad label ids, misaligned inputs, and similar data problems."""


class ParseError(DataError):
    """Malformed file content; ``offset`` is the byte position of the fault."""

    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class CheckpointError(RGBTError, ValueError):
    """Checkpoint does not match the model it is loaded into."""


class TrainingDiverged(RGBTError, RuntimeError):
    """Loss became non-finite during training."""

    def __init__(self, epoch, step, detail=""):
        self.epoch = epoch
        self.step = step
        super().__init__(f"training diverged at epoch={epoch} step={step}: {detail}".rstrip(": "))
