"""robustq - Train small quantized networks that hold up under attack."""

__version__ = "0.1.0"
