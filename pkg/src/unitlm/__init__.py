"""Speech-token language modelling on a unified text + codec vocabulary."""

__version__ = "0.1.0"
