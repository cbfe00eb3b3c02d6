"""Differentially private aggregation of search-event logs into weekly,
per-region trend releases with a certified (epsilon, delta) guarantee."""

__version__ = "0.1.0"
