"""Entropy monitoring and entropy-balanced tree rollout."""
