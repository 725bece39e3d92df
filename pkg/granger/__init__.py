"""Neural Granger-causality discovery for multivariate time series."""

__version__ = "0.1.0"
