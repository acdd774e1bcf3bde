"""Manual-backprop neural layers, the multi-task model and checkpoints."""
