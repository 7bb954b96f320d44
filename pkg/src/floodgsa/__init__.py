"""Factorial DEM perturbation, 2D shallow-water flood simulation, and Sobol sensitivity maps."""

__version__ = "0.1.0"
