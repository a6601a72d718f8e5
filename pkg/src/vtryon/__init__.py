"""Image-based virtual try-on in PyTorch."""

__version__ = "0.1.0"
