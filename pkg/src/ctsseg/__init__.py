"""Content-aware token sharing for ViT semantic segmentation, desk scale.

Kept import-light on purpose: the CLI pins BLAS thread pools before any
numpy-dependent module loads, so nothing heavy may run at package import.
"""

__version__ = "0.1.0"
