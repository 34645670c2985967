"""paracon: decide whether a chart connection is locally and globally metric."""

__version__ = "0.1.0"
