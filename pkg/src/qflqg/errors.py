"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes: ConfigError -> 1,
NumericalError -> 2, OracleSizeError -> 3.
"""


class QflqgError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(QflqgError):
    """Invalid configuration, model description, or quantizer geometry."""


class NumericalError(QflqgError):
    """Numerical failure during a solve or simulation (conditioning, overflow)."""


class OracleSizeError(QflqgError):
    """Requested brute-force instance exceeds the enumeration budget."""
