"""Semi-supervised multimodal domain generalization on synthetic benchmarks."""

__version__ = "0.1.0"
