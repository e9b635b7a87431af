"""MuFL - multi-tenant federated learning with activity consolidation and splitting."""

__version__ = "0.1.0"
