"""Differentiable joint-dimensional architecture search with solution-space regularization."""
from . import adcore, archspace, bench, costmodel, engine, regloss, shrink

__version__ = "0.1.0"

__all__ = ["adcore", "archspace", "bench", "costmodel", "engine", "regloss", "shrink", "__version__"]
