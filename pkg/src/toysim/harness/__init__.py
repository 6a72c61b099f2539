"""Scenario runner, trace, metrics and correctness oracle."""
