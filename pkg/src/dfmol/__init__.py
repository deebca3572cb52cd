"""Multi-modal flow matching for 3D molecule generation with categorical flow variants."""

__version__ = "0.1.0"
