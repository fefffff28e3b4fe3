"""Cross-scale attention multiple-instance learning on synthetic multi-scale data."""

__version__ = "0.1.0"
