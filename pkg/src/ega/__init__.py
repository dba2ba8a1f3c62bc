"""Class-activation-map localization trained with adversarial examples and CAM entropy."""

__version__ = "0.1.0"
