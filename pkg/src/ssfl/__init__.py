"""Self-supervised and personalised federated learning on image data."""

__version__ = "0.1.0"
