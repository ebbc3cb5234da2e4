"""Convolution + self-attention extractive QA, with backtranslation augmentation."""

__version__ = "0.1.0"
