"""Multimodal masked autoencoding, model-inversion completion and self-distillation
for volumetric segmentation with missing modalities."""

__version__ = "0.1.0"
