"""Segment-rollout RL training on a desk-scale linear-softmax policy."""

__version__ = "0.1.0"
