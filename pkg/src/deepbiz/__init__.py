"""Deep learning and classical baselines for business analytics, built on numpy."""

__version__ = "0.1.0"
