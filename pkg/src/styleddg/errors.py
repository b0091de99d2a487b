"""Exception types raised across the package."""


class StyleDDGError(Exception):
    """Base class; the CLI turns these into a one-line message and exit code 2."""


class ShapeError(StyleDDGError, ValueError):
    """Operand dimensions are incompatible."""


class InputError(StyleDDGError, ValueError):
    """An argument has an invalid value (bad label, malformed permutation, ...)."""


class ConfigError(StyleDDGError, ValueError):
    """Invalid configuration value or key."""


class StateError(StyleDDGError, RuntimeError):
    """Operation called in the wrong state, e.g. backward without a graph."""


class ProtocolError(StyleDDGError, RuntimeError):
    """A device is missing payloads the exchange phase should have delivered."""


class ConstructionError(StyleDDGError, RuntimeError):
    """A random structure could not be built within its retry budget."""
