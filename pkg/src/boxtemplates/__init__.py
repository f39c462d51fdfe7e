"""Structure-aware box templates for point clouds."""

__version__ = "0.1.0"
