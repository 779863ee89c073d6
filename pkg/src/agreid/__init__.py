"""Attribute-guided two-stage training for occluded person re-identification, at toy scale."""

__version__ = "0.1.0"
