"""Perceptually-aligned embedding toolkit: perturbations, a FiLM-conditioned
contrastive transformer head, perceptual metrics and embedding-space attacks."""

__version__ = "0.1.0"
