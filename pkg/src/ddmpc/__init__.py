"""Data-driven model predictive control toolkit."""
