"""ibrec: graph-based multimedia recommender with information-bottleneck denoising."""

__version__ = "0.1.0"
