"""Exception taxonomy.

Split along the CLI exit-code boundaries: configuration problems,
numerical-integrity problems, and I/O problems.
"""


class DistgpError(Exception):
    """Base class for all package errors."""


class ConfigError(DistgpError):
    """Invalid run configuration or network specification."""


class NumericalError(DistgpError):
    """Base class for numerical-integrity failures."""


class FactorizationFailure(NumericalError):
    """Cholesky failed on every rung of the jitter ladder."""


class DimensionMismatch(DistgpError):
    """Operands with incompatible shapes."""


class NonFiniteLoss(NumericalError):
    """Objective evaluated to NaN/Inf, or a guarded quantity left its domain."""


class NegativeVariance(NumericalError):
    """A predicted variance fell below the -1e-10 integrity floor."""


class DegenerateWeights(DistgpError):
    """Affine column with vanishing norm cannot be normalized."""


class InvalidDistribution(DistgpError):
    """Probability vector fails nonnegativity/normalization checks."""


class EmptyScores(DistgpError):
    """Score-based operation received an empty score array."""


class EmptyData(DistgpError):
    """Model initialization received an empty dataset."""


class IOFormatError(DistgpError):
    """Base class for on-disk format violations."""


class BadMagic(IOFormatError):
    """IDX or checkpoint file starts with an unexpected magic number."""


class TruncatedFile(IOFormatError):
    """File ended before the declared payload was read."""


class CountMismatch(IOFormatError):
    """Paired files declare inconsistent example counts."""
