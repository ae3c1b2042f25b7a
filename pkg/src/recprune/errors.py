"""Exception hierarchy shared by every module.

``ContractError`` and ``IndexError`` subclasses map to CLI exit code 1,
``FormatError`` (and plain ``OSError``) to exit code 2.
"""


class ContractError(ValueError):
    """A precondition or invariant of an operation was violated."""


class DimensionError(ContractError):
    """Operand extents are incompatible."""


class NonFiniteError(ContractError):
    """A tensor would hold NaN or Inf."""


class SequenceLengthError(ContractError):
    """Input sequence exceeds the model's maximum length."""


class PlanError(ContractError):
    """A pruning plan references structures the model does not have."""


class TokenIndexError(IndexError):
    """Token or class index outside the vocabulary."""


class FormatError(Exception):
    """Malformed on-disk artifact (config, dataset, plan, checkpoint)."""


class CheckpointError(FormatError):
    pass


class BadMagicError(CheckpointError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class DirectoryMismatchError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass
