"""Beta-weighted knowledge distillation on tiny synthetic language models."""
__version__ = "0.1.0"
