"""skillet: object-centric skill retrieval and replay for tabletop manipulation."""

__version__ = "0.1.0"
