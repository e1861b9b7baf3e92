"""ECG 1-D CNN toolkit."""

__version__ = "0.1.0"
