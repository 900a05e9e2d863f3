"""Collaborative-representation classification with a learned Mahalanobis metric."""

__version__ = "0.1.0"
