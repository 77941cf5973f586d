"""Pixel-attribution lab: gradient integration with pluggable sampling
distributions, scored by histogram mutual information."""

__version__ = "0.1.0"
