"""Gibbs sampling and exact convergence-rate analysis for Gaussian hierarchical models."""

__version__ = "0.1.0"
