"""Cross-modal alignment of audio autoencoder embeddings with tag self-attention."""

__version__ = "0.1.0"
