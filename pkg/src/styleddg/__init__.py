"""Decentralized federated domain generalization with style sharing, simulated in numpy."""

__version__ = "0.1.0"
