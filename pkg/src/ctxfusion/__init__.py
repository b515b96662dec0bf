"""Foreground/context fusion classifiers on synthetic composites, with
blur and FGSM robustness sweeps and feature analyses."""

__version__ = "0.1.0"
