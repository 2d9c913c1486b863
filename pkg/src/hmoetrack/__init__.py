"""Heterogeneous mixture-of-experts fusion for multimodal tracking with missing modalities."""

__version__ = "0.1.0"
