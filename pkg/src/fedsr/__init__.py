"""Simulator for semi-decentralized cloud-edge-device federated learning."""

__version__ = "0.1.0"
