"""Pyramid inpainting generator: multi-scale coarse/refine GAN stack with
per-level adversaries, free-form mask protocol and evaluation sweeps."""

__version__ = "0.1.0"
