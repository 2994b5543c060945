"""Detection-based text line recognition toolkit."""

from .core import Alphabet, BBox, CharAnnotation, Detection, LineSample

__all__ = ["Alphabet", "BBox", "CharAnnotation", "Detection", "LineSample"]
__version__ = "0.1.0"
