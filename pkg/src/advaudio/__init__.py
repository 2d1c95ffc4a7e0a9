"""White-box adversarial audio toolkit with a desk-scale surrogate model."""

__version__ = "0.1.0"
