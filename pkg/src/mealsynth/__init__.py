"""Ingredient-conditioned meal image synthesis with a cross-modal association space."""

__version__ = "0.1.0"
