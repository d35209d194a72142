"""Midline localization on brain slices with pose rectification and a refined U-Net."""
__version__ = "0.1.0"
