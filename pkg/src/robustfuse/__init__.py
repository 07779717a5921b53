"""Robust infrared/visible fusion for segmentation: a small numpy autodiff stack,
searchable fusion networks, PGD attacks and adversarial training strategies."""

__version__ = "0.1.0"
