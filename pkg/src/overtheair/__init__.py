"""Over-the-air audio adversarial examples against a small CTC recogniser."""

__version__ = "0.1.0"
