"""Hard-attention reading models that learn when to skip words."""

__version__ = "0.1.0"
