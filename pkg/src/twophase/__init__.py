"""Design and analysis of two-phase subsamples for regression modelling."""

__version__ = "0.1.0"
