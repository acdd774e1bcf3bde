"""Datasets, losses and the multi-task training loop."""
