"""Exception hierarchy shared by every subsystem.

The CLI maps these onto exit codes, so new failure modes should subclass one of
the groups below rather than raising bare ``ValueError``.
"""


class BioMambaError(Exception):
    """Root of all package errors."""


class ContractError(BioMambaError, ValueError):
    """A caller violated a documented precondition."""


class DimensionError(ContractError):
    """Shapes or axes do not line up."""


class DomainError(ContractError):
    """Input outside the mathematical domain of an op (e.g. log of a non-positive)."""


class NumericError(BioMambaError, FloatingPointError):
    """A NaN or infinity appeared where finite values are required."""


class InputError(BioMambaError, ValueError):
    """Bad user-supplied data (empty corpus, unusable QA set, unknown token id)."""


class ParseError(InputError):
    """Malformed file content; the message names the offending path or line."""


class ValidationError(InputError):
    """Well-formed data that breaks a semantic invariant."""


class CheckpointError(BioMambaError):
    """Base for checkpoint load failures."""


class CheckpointFormatError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class UnknownTensorError(CheckpointError):
    pass
