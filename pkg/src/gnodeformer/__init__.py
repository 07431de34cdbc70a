"""Spectral graph transformer with Runge-Kutta ODE blocks and a
single-process federated training simulator.
"""

__version__ = "0.1.0"
