"""Two-level contrastive predictive coding with a learned variable-rate segmenter."""

__version__ = "0.1.0"
