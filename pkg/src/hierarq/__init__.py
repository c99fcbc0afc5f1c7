"""Task-aware streaming video understanding with bounded dual memory.

Two text-conditioned modulators re-weight incoming frame tokens for an
entity-focused and a scene-level stream; each stream keeps short/long-term
memory banks of fixed capacity, and two hierarchically coupled querying
transformers turn the banks into a fixed-size embedding per timestep, so
arbitrarily long videos run in constant state.
"""

__version__ = "0.1.0"

from .errors import (ConfigError, DimensionError, FormatError, HierarqError,
                     NumericalError, SequenceError)

__all__ = [
    "__version__",
    "HierarqError",
    "ConfigError",
    "DimensionError",
    "FormatError",
    "NumericalError",
    "SequenceError",
]
