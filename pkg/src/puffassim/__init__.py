"""Gaussian-puff dispersion with bootstrap particle-filter assimilation of dosage data."""

__version__ = "0.1.0"
