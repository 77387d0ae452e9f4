"""Federated learning simulator with group distillation (FedDistill), FedAvg and FedProx."""

__version__ = "0.1.0"
