"""Exact (HMC) and approximate (VB) Bayesian inference for spatial GLM-AR models."""

__version__ = "1.0.0"
