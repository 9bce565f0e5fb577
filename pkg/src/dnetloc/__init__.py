"""Location-aware multi-label chest X-ray classification at desk scale."""

__version__ = "0.1.0"
