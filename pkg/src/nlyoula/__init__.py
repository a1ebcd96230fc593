"""Youla-parameterized policies with certified contracting/Lipschitz Q-models."""

__version__ = "0.1.0"
