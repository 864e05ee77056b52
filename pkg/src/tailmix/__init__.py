"""Long-tailed latent-space modeling: mixture clustering, pseudo-label metric
learning and zero-shot macro-AUC evaluation over precomputed embeddings."""

__version__ = "0.1.0"
