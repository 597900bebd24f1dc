"""Softmax token policy, advantages and update rules."""
