"""Sequence-space equilibrium solver: neural policies over shock histories."""

from . import autodiff, config, growth, heads, hetero, kernel, nn, olg, oracles, \
    reporting, stoch

__all__ = ["autodiff", "config", "growth", "heads", "hetero", "kernel", "nn",
           "olg", "oracles", "reporting", "stoch"]
__version__ = "0.1.0"
