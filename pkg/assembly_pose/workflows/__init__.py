"""Pipelines built on the graph engine."""
