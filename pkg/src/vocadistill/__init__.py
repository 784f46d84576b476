"""Masked-LM distillation into students with smaller vocabularies, on numpy."""

__version__ = "0.1.0"
