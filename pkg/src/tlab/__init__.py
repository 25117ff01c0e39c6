"""Numerical lab for transfer learning in deep linear and mean-field ReLU networks."""
__version__ = "0.1.0"
