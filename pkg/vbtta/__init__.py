"""
Variational Bayes weighting of test-time augmentations.
"""

__version__ = "0.1.0"
