"""Expression-classification pipeline: cohort merging, batch correction,
boosted-tree modeling, exact tree attributions, and differential expression."""

__version__ = "0.1.0"
