"""Sequential recommendation with adaptive similarity thresholds for contrastive pairs."""

__version__ = "0.1.0"
