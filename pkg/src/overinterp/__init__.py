"""Sufficient input subsets and pixel-subset experiments for small image classifiers."""

__version__ = "0.1.0"
