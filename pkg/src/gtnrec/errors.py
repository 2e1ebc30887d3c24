"""Exception hierarchy shared across gtnrec."""


class GtnrecError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(GtnrecError, ValueError):
    """Operand shapes do not fit the operation."""


class EmptyNeighborhoodError(GtnrecError, ValueError):
    """A masked softmax row has no active entries (node without neighbors or self-loop)."""


class TapeError(GtnrecError, RuntimeError):
    """Misuse of the autodiff tape (non-scalar loss, detached loss, repeated backward)."""


class ParseError(GtnrecError, ValueError):
    """Malformed input file; message carries ``path:line``."""


class RangeError(GtnrecError, ValueError):
    """A value lies outside its allowed range."""


class TooSmallError(GtnrecError, ValueError):
    """Not enough data for the requested operation."""


class ContractError(GtnrecError, ValueError):
    """Precondition of an operation violated (e.g. empty batch)."""


class DivergenceError(GtnrecError, ArithmeticError):
    """Training loss became non-finite."""

    def __init__(self, epoch: int, lr: float, loss: float):
        self.epoch = epoch
        self.lr = lr
        self.loss = loss
        super().__init__(
            f"training diverged at epoch {epoch} (lr={lr:g}, loss={loss}); "
            "try a lower learning rate"
        )


class CheckpointError(GtnrecError, ValueError):
    """Checkpoint and manifest disagree, or a checkpoint cannot be read."""


class FormatError(GtnrecError, ValueError):
    """Artifact schema/version mismatch, or incompatible artifacts merged."""


class DegenerateFeatureError(DimensionError):
    """Layer normalization over fewer than two features."""
