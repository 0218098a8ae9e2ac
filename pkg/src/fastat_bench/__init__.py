"""Controlled benchmark harness for fast adversarial training."""
__version__ = "0.1.0"
