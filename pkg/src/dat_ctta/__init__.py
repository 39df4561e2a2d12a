"""Distribution-aware sparse tuning for continual test-time segmentation."""

__version__ = "0.1.0"
