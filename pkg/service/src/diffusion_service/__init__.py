"""Stateless HTTP sidecar for latent encoding and score-distillation gradients."""

__version__ = "0.1.0"
