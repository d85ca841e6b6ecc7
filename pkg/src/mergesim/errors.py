"""Exception types shared across the simulator.

The CLI maps these onto exit codes: data/shape problems exit 3, protocol
violations exit 4.
"""


class EncodingRangeError(ValueError):
    """Input magnitude exceeds the fixed-point encoding range."""


class ShapeMismatchError(ValueError):
    """Tensor shapes or configs are structurally incompatible."""


class DataFormatError(ValueError):
    """A weight/calibration container is malformed or of the wrong kind."""


class DegenerateInputError(ValueError):
    """Numerically degenerate input (e.g. zero-norm row in a cosine loss)."""


class ProtocolError(RuntimeError):
    """Two-party protocol contract violated (e.g. Beaver triple reuse)."""
