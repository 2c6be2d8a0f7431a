"""Software twin of a round optical tactile sensor."""

__version__ = "0.3.0"
