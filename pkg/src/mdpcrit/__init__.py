"""Exact and learning-based tools for comparing discounted, average and
total reward criteria on finite MDPs."""

__version__ = "0.1.0"
