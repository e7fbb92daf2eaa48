"""Deep Q-learning engine for interpolating ads into recommendation lists."""

__version__ = "0.1.0"
