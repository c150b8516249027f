"""Convolutional deep domain adaptation for time series (CoDATS) with
optional weak supervision from target label proportions."""

__version__ = "0.1.0"
