"""Workbench for calibrating non-Gaussian transport noise in a rotating
shallow water model: simulate fine/coarse flows, extract streamfunction
noise increments, learn their law with a diffusion Schrodinger bridge and
score stochastic ensemble forecasts against Gaussian baselines."""

from .grid import Grid, RefinementMismatch, ScalarField, VectorField

__all__ = [
    "Grid",
    "ScalarField",
    "VectorField",
    "RefinementMismatch",
]

__version__ = "0.1.0"
