"""List-mode TOF-PET reconstruction toolkit."""

__version__ = "0.1.0"
