"""Stochastic and generative subgrid closure modeling for chaotic ODEs."""

__version__ = "0.1.0"
