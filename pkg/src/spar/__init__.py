"""Support-preserving residual offline policy improvement on oracle tasks."""

__version__ = "0.1.0"
