"""Stain deconvolution, augmentation and H&E-adversarial training on a numpy autodiff core."""

__version__ = "0.1.0"
