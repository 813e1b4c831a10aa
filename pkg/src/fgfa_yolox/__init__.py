"""Flow-guided temporal feature aggregation for a one-stage anchor-free video detector."""

__version__ = "0.1.0"
