"""mfrecon: multi-frame guided implicit reconstruction of articulated bodies."""

__version__ = "0.1.0"
