"""Exception types shared across the package."""


class LcmTreeError(Exception):
    """Base class for all package-specific errors."""


class TreeError(LcmTreeError):
    """Invalid tree document or tree query (unknown node, bad structure)."""


class DataError(LcmTreeError):
    """Invalid dataset document or label outside the declared trees."""


class ConfigError(LcmTreeError):
    """Inconsistent model, fit, or simulation configuration."""


class NumericalError(LcmTreeError):
    """Non-finite value encountered during inference; carries the term label."""
