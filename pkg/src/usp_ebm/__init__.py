"""
usp-ebm: maximum-likelihood training of energy-based models with short-run
Langevin sampling, Riemann/self-normalized importance sampling and uniform
support partitioning, plus the numerical checks and OOD analysis around them.
"""

__version__ = "0.1.0"
