"""Binding by synchrony in converted complex-valued Boltzmann machine stacks."""

__version__ = "0.1.0"
