"""Synthetic tool-use world: vocabulary, tools, episodes and tasks."""
