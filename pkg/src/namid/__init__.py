"""Natural/adversarial mutual-information defense at desk scale."""

__version__ = "0.1.0"
