"""Desk-scale personalized federated learning simulator with hypergraph
uncertainty estimation and hypergraph label propagation."""

from .config import ExperimentConfig, make_config, parse_config

__all__ = ["ExperimentConfig", "make_config", "parse_config"]
__version__ = "0.1.0"
