"""Two-stream cross-modal self-supervised learning on synthetic clips."""

__version__ = "0.1.0"
