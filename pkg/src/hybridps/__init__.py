"""Hybrid pre-training for person search from detection and re-ID sub-task corpora."""

__version__ = "0.1.0"
