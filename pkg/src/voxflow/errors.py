"""Exception hierarchy shared by every module.

The CLI maps these onto process exit codes: contract errors exit 1,
I/O errors exit 2 and failed verification suites exit 3.
"""


class VoxflowError(Exception):
    """Base class for all library errors."""


class ContractError(VoxflowError, ValueError):
    """A precondition or shape contract was violated by the caller."""


class NonFiniteError(VoxflowError, ArithmeticError):
    """An operation produced NaN or Inf."""


class SingularMatrixError(ContractError):
    """An invertible 1x1x1 convolution weight became (numerically) singular."""


class TrainingDiverged(VoxflowError):
    """Training hit a non-finite loss.

    ``last_good`` holds whatever the trainer could salvage (parameters from the
    last finite step); ``where`` names the stage or latent level.
    """

    def __init__(self, message, last_good=None, where=None):
        super().__init__(message)
        self.last_good = last_good
        self.where = where


class FormatError(VoxflowError):
    """Base class for on-disk format problems."""


class BadMagicError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class DimOverflowError(FormatError):
    pass


class VerificationFailed(VoxflowError):
    pass
