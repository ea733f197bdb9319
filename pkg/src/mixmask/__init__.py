"""Filling-based masking (MixMask) for Siamese ConvNets at desk scale."""

__version__ = "0.1.0"
