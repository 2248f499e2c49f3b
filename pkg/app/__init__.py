"""Weakly supervised segmentation engine."""
