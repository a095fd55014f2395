"""Class-imbalanced lesion classification with translation-based minority synthesis."""

__version__ = "0.1.0"
