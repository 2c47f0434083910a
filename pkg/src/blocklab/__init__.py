"""blocklab: a desk-scale lab for blockwise sharpness and per-block learning rates."""

__version__ = "0.1.0"
