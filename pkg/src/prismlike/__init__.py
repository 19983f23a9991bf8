"""Thread-state and thread-dynamics performance degradation diagnosis."""

__version__ = "0.1.0"
