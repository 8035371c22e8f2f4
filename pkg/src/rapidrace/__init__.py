"""Multi-agent racing as a constrained dynamic potential game."""

__version__ = "0.1.0"
