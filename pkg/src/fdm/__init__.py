"""fdm: two-site federated data-model simulation on phantom cardiac images."""

__version__ = "0.1.0"
