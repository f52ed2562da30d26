"""Generalized Nash and bilevel equilibria for two-player racing games."""

__version__ = "0.1.0"
