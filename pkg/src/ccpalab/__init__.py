"""Coordinated cyber-physical attack lab on a DC power-flow grid model.

Simulates line-outage attacks masked by false data injection, exposes them
with moving target defense, and localizes the tripped lines with a small CNN
that can be meta-initialized with first-order MAML.
"""

__version__ = "0.1.0"
