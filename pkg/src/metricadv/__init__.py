"""Adversarial masks against metric-embedding face recognisers, at toy scale."""

__version__ = "0.1.0"
