"""Federated-learning simulator for auditing how group-fairness bias spreads between parties."""

__version__ = "0.1.0"
