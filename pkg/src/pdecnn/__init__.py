"""Residual CNNs built from discretized PDE dynamics (parabolic, Hamiltonian, second-order)."""
from .network import DynamicsSpec, Network, count_weights, init_weights
from .tensor import make_rng

__all__ = ["DynamicsSpec", "Network", "count_weights", "init_weights", "make_rng"]
__version__ = "0.1.0"
