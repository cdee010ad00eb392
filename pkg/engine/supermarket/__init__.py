"""Mean-field power-of-d load balancing with MAP inputs and PH service."""

__version__ = "0.1.0"
