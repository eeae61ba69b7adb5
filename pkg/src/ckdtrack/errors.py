"""Exceptions raised across ckdtrack.

Every exception derives from :py:class:`CKDError`, so that the command-line can turn
any of them into a one-line diagnostic.
"""


class CKDError(Exception):
    """Root of all ckdtrack errors."""


class ConfigurationError(CKDError, ValueError):
    """A setting, a geometry or a generator parameter is invalid."""


class DataError(CKDError):
    """Sequences or annotations on disk are inconsistent."""


class ContractError(CKDError, ValueError):
    """A function received arguments violating its preconditions.

    Typically mismatched shapes between the two modalities, or between teacher and
    student features.
    """


class NumericError(CKDError, ArithmeticError):
    """A forward pass or a loss produced non-finite values."""


class NonFiniteLoss(NumericError):
    """Indicates that one of the loss terms is NaN or infinite."""

    msg = """The {term} loss is not finite (value: {value}) at step {step}. This
usually means the learning rates are too large for the model size, or that the style
statistics of a branch collapsed (a channel with zero variance across tokens). Lower
train.lr_backbone and train.lr_head, or check the input sequences."""

    def __init__(self, term: str, value: float, step: int = -1):
        super().__init__(term, value, step)
        self.term = term
        self.value = value
        self.step = step

    def __str__(self):
        return " ".join(
            self.msg.format(term=self.term, value=self.value, step=self.step).split()
        )


class CheckpointError(CKDError):
    """A checkpoint is corrupt, of the wrong version, or of the wrong geometry."""

    msg = """Could not load checkpoint {path}: {reason}. Checkpoints are only
compatible with the model geometry (layers, channels, heads, patch and crop sizes) they
were trained with."""

    def __init__(self, path, reason: str):
        super().__init__(str(path), reason)
        self.path = path
        self.reason = reason

    def __str__(self):
        return " ".join(self.msg.format(path=self.path, reason=self.reason).split())
