"""Exact free-fermion solution of the 2D Ising model on finite cylinders,
multiscale propagator decomposition, and the associated kernel calculus."""

__version__ = "0.1.0"
