"""Domain-adversarial detection and multi-domain evaluation."""
__version__ = "0.1.0"
