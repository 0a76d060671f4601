"""Deep landscape features for continuous black-box optimization problems."""

__version__ = "0.1.0"
