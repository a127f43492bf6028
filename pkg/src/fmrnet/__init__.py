"""Memory/rearrangement-augmented reconstruction network for textured-surface defect inspection."""

__version__ = "0.1.0"
