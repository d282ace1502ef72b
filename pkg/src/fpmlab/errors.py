"""Exception hierarchy shared across the package."""


class FpmError(Exception):
    """Base class for all package-specific failures."""


class ConfigurationError(FpmError):
    """Invalid static configuration (layer sizes, schedule bounds, ...)."""


class ShapeError(FpmError):
    """Array dimension mismatch."""


class DomainError(FpmError):
    """Argument outside its mathematical domain."""


class NumericError(FpmError):
    """Non-finite values encountered; the run cannot continue."""


class FormatError(FpmError):
    """Corrupt or truncated on-disk artifact."""
