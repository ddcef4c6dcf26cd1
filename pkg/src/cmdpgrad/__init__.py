"""Simulation-based optimization of constrained average-cost MDPs."""
__version__ = "0.1.0"
