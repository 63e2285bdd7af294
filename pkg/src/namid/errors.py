"""Error taxonomy shared across the package."""


class NamidError(Exception):
    """Base class; the CLI maps any subclass to a nonzero exit."""


class ConfigError(NamidError):
    pass


class DimensionError(NamidError, ValueError):
    pass


class InputError(NamidError, ValueError):
    pass


class StateError(NamidError, RuntimeError):
    pass


class FormatError(NamidError):
    pass


class VersionError(NamidError):
    pass


class DivergenceError(NamidError, FloatingPointError):
    """Non-finite value during training or attack ascent."""


class BatchTooSmallError(InputError):
    pass


class EmptySelectionError(NamidError):
    """Every batch of an estimator epoch had an empty selection."""
