"""Desk-scale task-adaptive incremental learning: decoupled CNN critical paths, federated rounds, traffic accounting."""

__version__ = "0.1.0"
