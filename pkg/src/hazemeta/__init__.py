"""Meta-learned domain generalization for single image dehazing.

Adaptation network -> distance-aware aggregation -> conditioned dehazing network,
trained episodically over synthetic haze domains.
"""

__version__ = "0.1.0"


class HazeMetaError(Exception):
    """Base class for errors raised by this package."""


class ConfigError(HazeMetaError, ValueError):
    pass


class NumericalError(HazeMetaError, FloatingPointError):
    """A loss or activation became non-finite."""

    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot


class DataError(HazeMetaError, OSError):
    pass
