"""ViT feature extraction for generalized zero-shot learning, at desk scale."""

__version__ = "0.1.0"
