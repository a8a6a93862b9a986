"""Single-forward-pass, layer-local training with fixed class embeddings."""

__version__ = "0.1.0"
