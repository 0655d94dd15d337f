"""Operational shell: configuration, datasets, checkpoints, CLI."""
