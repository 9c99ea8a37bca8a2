"""Pseudospectral experiments for the periodic derivative NLS, its gauge group and Gibbs measures."""

__version__ = "0.1.0"
