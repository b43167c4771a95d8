"""Grammar-based fairness testing for black-box text models."""

__version__ = "0.1.0"
