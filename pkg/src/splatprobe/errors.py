"""Exception hierarchy shared across the package.

CLI exit-code mapping: usage errors exit 1 (argparse), DataError/ShapeError/
FormatError/AlignmentError exit 2, NumericalError exit 3.
"""


class SplatProbeError(Exception):
    """Base class for all package errors."""


class DataError(SplatProbeError):
    """Invalid data values (non-finite input, bad ranges, invalid rank)."""


class ShapeError(SplatProbeError):
    """Mismatched array shapes or channel counts."""


class FormatError(SplatProbeError):
    """Malformed file content (bad magic, truncation, unsupported layout)."""


class AlignmentError(FormatError):
    """Cross-file consistency violation inside a scene bundle."""


class NumericalError(SplatProbeError):
    """Non-finite values produced during optimization."""
