"""Single-channel two-speaker speech separation: BGRU embeddings, attractor
masks, GMM/k-means clustering, and BSS-eval scoring."""

__version__ = "0.1.0"
