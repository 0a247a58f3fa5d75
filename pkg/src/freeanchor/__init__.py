"""Learning-to-match anchor assignment: losses, toy detector, synthetic scenes and evaluation."""

__version__ = "0.1.0"
