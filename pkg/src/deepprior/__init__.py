"""Hierarchical variational-Bayes meta-learning with a learned deep prior."""

__version__ = "0.1.0"
