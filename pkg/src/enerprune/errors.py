"""Exception hierarchy shared across the toolkit.

The CLI maps these onto exit codes: ConfigError -> 2, NumericError -> 3,
InfeasibleProfileError -> 4.
"""


class EnerpruneError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(EnerpruneError):
    """Bad user input: paths, flags, malformed files, invalid parameters."""


class ShapeError(EnerpruneError):
    """Tensor/layer dimension mismatch."""


class TensorFileError(ConfigError):
    """Problem with a .tnsr file."""


class BadMagicError(TensorFileError):
    """File does not start with the TNSR magic/version."""


class TruncatedPayloadError(TensorFileError):
    """Header promises more data than the file contains."""


class DimOverflowError(TensorFileError):
    """Header dims multiply out to an implausible element count."""


class InfeasibleProfileError(EnerpruneError):
    """Hardware profile cannot schedule the layer (a level is too small)."""


class NumericError(EnerpruneError):
    """Non-finite values where finite ones are required (divergence etc.)."""
