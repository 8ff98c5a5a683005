"""Low-rank compression and fast solvers for ensembles of perturbed linear systems."""

__version__ = "0.1.0"
