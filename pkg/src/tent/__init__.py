"""Task-adaptive few-shot node classification on attributed graphs."""

__version__ = "0.1.0"
