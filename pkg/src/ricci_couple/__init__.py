"""Geodesic random walks and reflection couplings on manifolds with evolving metrics."""

__version__ = "0.1.0"
