"""embed_bridge: export per-segment code features for the coderec engine."""

__version__ = "0.1.0"
