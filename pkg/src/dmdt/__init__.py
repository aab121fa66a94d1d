"""Dynamic 2D sampling + text-guided decoding for visual grounding, on numpy."""

__version__ = "0.1.0"
