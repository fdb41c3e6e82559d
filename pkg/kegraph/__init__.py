"""Knowledge-enhanced graph fraud detection robust to hidden fraud."""

__version__ = "0.1.0"
