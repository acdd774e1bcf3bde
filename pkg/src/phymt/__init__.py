"""Multi-task physical-layer learning on a frozen, adapter-tuned backbone."""

__version__ = "0.1.0"
