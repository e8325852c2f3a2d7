"""Exception hierarchy shared by all modules."""


class ClusterKnnError(Exception):
    """Base class for all errors raised by this package."""


class ParseError(ClusterKnnError):
    """Malformed input file."""


class UnsupportedElement(ParseError):
    """Element symbol outside the supported set."""


class ShapeError(ClusterKnnError):
    """Array dimensions or lengths do not match."""


class ConfigError(ClusterKnnError):
    """Invalid configuration or arguments."""


class NumericalError(ClusterKnnError):
    """Numerical failure (singular solve, invalid kernel values, ...)."""


class DegenerateGeometry(ClusterKnnError):
    """Geometry with coincident atoms."""
