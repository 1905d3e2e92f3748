"""Sparse/diffuse dictionary learning for locating anomalies in wavefield data."""

__version__ = "0.1.0"
