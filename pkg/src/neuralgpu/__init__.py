"""Training and failure analysis for the Neural GPU on base-b arithmetic."""

__version__ = "0.1.0"
