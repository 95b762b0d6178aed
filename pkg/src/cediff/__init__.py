"""Counterfactual examples from classifier-free guided diffusion."""

__version__ = "0.1.0"
