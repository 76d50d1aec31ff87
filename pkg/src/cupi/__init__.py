"""Non-transferable learning with a compact pyramid isolation domain."""

__version__ = "0.1.0"
