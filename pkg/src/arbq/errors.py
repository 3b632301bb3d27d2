"""Exception hierarchy shared across the package.

Errors fall into three families that the CLI maps onto distinct exit codes:
usage problems (argparse, exit 1), malformed data or files (exit 2), and
numerical failures such as singular Hessians (exit 3).
"""


class ArbqError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(ArbqError):
    """Invalid argument: bad shape, non-finite values, out-of-range options."""


class DataFormatError(ArbqError):
    """Malformed input data or container file."""


class BadMagicError(DataFormatError):
    """File does not start with the expected magic bytes."""


class UnsupportedVersionError(DataFormatError):
    """Container version is newer than this implementation understands."""


class UnknownDtypeError(DataFormatError):
    """Container declares a dtype tag this implementation does not support."""


class TruncatedFileError(DataFormatError):
    """File ended before the declared payload was complete."""


class ChecksumError(DataFormatError):
    """Stored checksum does not match the payload."""


class NumericalError(ArbqError):
    """Numerical failure during quantization."""


class SingularHessianError(NumericalError):
    """Hessian factorization failed; the matrix is singular or indefinite."""


class DegenerateCalibrationError(NumericalError):
    """Calibration statistics carry no usable signal (e.g. 1'S1 = 0)."""
