"""Two-stage adaptation of a small RoBERTa-style encoder for imbalanced text classification."""

__version__ = "0.1.0"

CLASSES = ("CLEAN", "OFFENSIVE", "HATE")
