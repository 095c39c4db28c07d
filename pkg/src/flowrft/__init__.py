"""flowrft - reinforcement fine-tuning lab for small flow-matching models."""

from .flowrft import main

__version__ = "0.1.0"
__all__ = ["main"]
