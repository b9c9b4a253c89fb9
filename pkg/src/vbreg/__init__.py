"""Bayesian linear and clustered hierarchical regression by Gibbs sampling, CAVI and SVI."""

__version__ = "0.1.0"
