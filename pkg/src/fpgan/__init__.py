"""Desk-scale few-shot GAN with depthwise-separable generator convolutions."""

__version__ = "0.1.0"
