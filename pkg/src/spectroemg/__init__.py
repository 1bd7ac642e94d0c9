"""Spectrogram-and-attention EMG classifier: signal ingest, feature
extraction, a from-scratch convolutional network, and evaluation tooling."""

from .backend import kernel_backend

__version__ = "0.1.0"

__all__ = ["kernel_backend", "__version__"]
